import numpy as np
import pytest
import torch

from text2pose.diffusion import training_loss
from text2pose.errors import (
    CorruptFile,
    InvalidGrouping,
    NonFiniteInput,
    ShapeMismatch,
    UnsupportedFormat,
)
from text2pose.model import (
    AttentionBlock,
    DenoiserConfig,
    GraphSpatialBlock,
    PoseDenoiser,
    load_checkpoint,
    save_checkpoint,
    timestep_embedding,
)
from text2pose.skeleton import adjacency, build_default_topology, normalize_adjacency
from text2pose.text import Vocabulary


def tiny_config(**overrides):
    base = dict(
        keypoint_count=17,
        grid_size=8,
        base_channels_per_keypoint=1,
        text_dim=8,
        time_embed_dim=16,
        vocab_size=6,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return PoseDenoiser(tiny_config())


class TestTimestepEmbedding:
    def test_t0_sines_zero_cosines_one(self):
        emb = timestep_embedding(torch.tensor([0]), 32)[0]
        assert torch.all(emb[:16] == 0.0)
        assert torch.all(emb[16:] == 1.0)

    def test_distinct_timesteps_differ(self):
        embs = timestep_embedding(torch.arange(1, 201), 64)
        for i in range(0, 199, 37):
            assert not torch.allclose(embs[i], embs[i + 1])

    def test_first_frequency_is_one(self):
        emb = timestep_embedding(torch.tensor([1]), 128)[0]
        assert emb[0] == pytest.approx(np.sin(1.0), abs=1e-12)


class TestForward:
    def test_output_shape_17x64x64(self):
        torch.manual_seed(1)
        model = PoseDenoiser(DenoiserConfig(grid_size=64, vocab_size=4))
        x = torch.randn(1, 17, 64, 64)
        text = torch.randn(1, 64)
        assert model(x, 100, text).shape == (1, 17, 64, 64)

    def test_deterministic(self, tiny_model):
        x = torch.randn(2, 17, 8, 8)
        text = torch.randn(2, 8)
        assert torch.equal(tiny_model(x, 3, text), tiny_model(x, 3, text))

    def test_shape_mismatch(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            tiny_model(torch.randn(1, 17, 16, 16), 1, torch.randn(1, 8))

    def test_non_finite_input(self, tiny_model):
        x = torch.full((1, 17, 8, 8), float("nan"))
        with pytest.raises(NonFiniteInput):
            tiny_model(x, 1, torch.randn(1, 8))

    def test_text_vector_changes_output(self, tiny_model):
        # make cross-attention projections nonzero first
        for name, p in tiny_model.named_parameters():
            if "proj_cross" in name:
                torch.nn.init.normal_(p, std=0.1)
        x = torch.randn(1, 17, 8, 8)
        out_a = tiny_model(x, 2, torch.zeros(1, 8))
        out_b = tiny_model(x, 2, torch.ones(1, 8))
        assert (out_a - out_b).abs().max() > 0


class TestAttentionBlock:
    def test_identity_at_zero_init_projections(self):
        torch.manual_seed(2)
        block = AttentionBlock(34, text_dim=8, groups=17)
        x = torch.randn(2, 34, 4, 4)
        out = block(x, torch.randn(2, 8))
        assert torch.allclose(out, x, atol=1e-7)

    @pytest.mark.parametrize("res", [8, 16])
    def test_shape_preserved(self, res):
        torch.manual_seed(3)
        block = AttentionBlock(34, text_dim=8, groups=17)
        x = torch.randn(1, 34, res, res)
        assert block(x, torch.randn(1, 8)).shape == x.shape


class TestGraphSpatialBlock:
    def a_gcn(self):
        return normalize_adjacency(adjacency(build_default_topology()))

    def test_zero_transform_is_exact_identity(self):
        block = GraphSpatialBlock(17, 34, 4, self.a_gcn())
        with torch.no_grad():
            block.transform.weight.zero_()
        x = torch.randn(3, 34, 4, 4)
        assert torch.equal(block(x), x)

    def test_shape_preserved(self):
        block = GraphSpatialBlock(17, 272, 8, self.a_gcn())
        x = torch.randn(2, 272, 8, 8)
        assert block(x).shape == (2, 272, 8, 8)

    def test_channel_grouping_validated(self):
        with pytest.raises(InvalidGrouping):
            GraphSpatialBlock(17, 33, 4, self.a_gcn())

    def test_node_permutation_equivariance(self):
        torch.manual_seed(4)
        k, per_node, res = 17, 2, 4
        a_gcn = self.a_gcn()
        block = GraphSpatialBlock(k, k * per_node, res, a_gcn)
        perm = torch.randperm(k, generator=torch.Generator().manual_seed(5))
        permuted = GraphSpatialBlock(
            k, k * per_node, res, a_gcn[perm][:, perm].numpy() if torch.is_tensor(a_gcn) else a_gcn[perm][:, perm]
        )
        permuted.load_state_dict({**block.state_dict(), "a_gcn": block.a_gcn[perm][:, perm]})
        x = torch.randn(2, k * per_node, res, res)
        with torch.no_grad():
            x_groups = x.reshape(2, k, per_node, res, res)
            out_perm_in = permuted(x_groups[:, perm].reshape(2, k * per_node, res, res))
            out_groups = block(x).reshape(2, k, per_node, res, res)[:, perm]
        assert torch.allclose(
            out_perm_in.reshape(2, k, per_node, res, res), out_groups, atol=1e-6
        )


class TestAblationFlag:
    def test_flag_removes_block_structurally(self):
        torch.manual_seed(6)
        model = PoseDenoiser(tiny_config(use_graph_block=False))
        assert model.graph_block is None
        assert not any("graph_block" in name for name, _ in model.named_parameters())

    def test_deleted_block_equals_zeroed_block(self):
        torch.manual_seed(7)
        model = PoseDenoiser(tiny_config())
        x = torch.randn(1, 17, 8, 8)
        text = torch.randn(1, 8)
        with torch.no_grad():
            model.graph_block.transform.weight.zero_()
        out_zeroed = model(x, 4, text)
        block, model.graph_block = model.graph_block, None
        out_deleted = model(x, 4, text)
        model.graph_block = block
        assert torch.equal(out_zeroed, out_deleted)

    def test_nonzero_block_changes_output(self):
        torch.manual_seed(8)
        model = PoseDenoiser(tiny_config())
        with torch.no_grad():
            torch.nn.init.normal_(model.graph_block.transform.weight, std=0.5)
        x = torch.randn(1, 17, 8, 8)
        text = torch.randn(1, 8)
        out_graph = model(x, 4, text)
        block, model.graph_block = model.graph_block, None
        out_plain = model(x, 4, text)
        model.graph_block = block
        assert (out_graph - out_plain).abs().max() > 0


def finite_difference_check(model, n_weights=32, seed=0):
    """Central finite differences on sampled weights of every block family."""
    model = model.double()
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 17, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 17, 8, 8, generator=gen, dtype=torch.float64)
    tokens = torch.tensor([[2, 3], [4, 5]])
    t = torch.tensor([3, 7])

    def loss_value():
        text = model.encode_text(tokens)
        return training_loss(eps, model(x, t, text))

    loss = loss_value()
    loss.backward()

    families = {
        "conv": "stem.weight",
        "attention": "mid_attn.qkv.weight",
        "cross_attention": "mid_attn.v_text.weight",
        "time_projection": "time_mlp.0.weight",
        "text_table": "text_encoder.table.weight",
    }
    if model.graph_block is not None:
        families["graph_transform"] = "graph_block.transform.weight"
    params = dict(model.named_parameters())
    rng = np.random.default_rng(seed)

    per_family = max(1, n_weights // len(families))
    checked = 0
    worst = 0.0
    for family, name in families.items():
        p = params[name]
        grad = p.grad
        flat = p.detach().reshape(-1)
        for _ in range(per_family):
            idx = int(rng.integers(flat.numel()))
            h = 1e-5 * max(1.0, abs(float(flat[idx])))
            with torch.no_grad():
                flat[idx] += h
                plus = float(loss_value())
                flat[idx] -= 2 * h
                minus = float(loss_value())
                flat[idx] += h
            fd = (plus - minus) / (2 * h)
            analytic = float(grad.reshape(-1)[idx])
            denom = max(abs(fd), abs(analytic), 1e-8)
            rel = abs(fd - analytic) / denom
            worst = max(worst, rel)
            assert rel <= 1e-4, f"{family}:{name}[{idx}] rel error {rel}"
            checked += 1
    return checked, worst


class TestGradients:
    def test_finite_differences_all_block_types(self):
        torch.manual_seed(9)
        model = PoseDenoiser(tiny_config())
        # give the zero-initialized projections real values so their
        # upstream weights receive gradient signal
        with torch.no_grad():
            for name, p in model.named_parameters():
                if "proj_self" in name or "proj_cross" in name:
                    torch.nn.init.normal_(p, std=0.05)
        checked, worst = finite_difference_check(model, n_weights=36)
        assert checked >= 32


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_model, tmp_path):
        vocab = Vocabulary.build(["standing pose", "arms up high"])
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_model, path, vocab, {"timesteps": 50})
        loaded, loaded_vocab, extra = load_checkpoint(path)
        assert extra == {"timesteps": 50}
        assert loaded_vocab.token_to_id == vocab.token_to_id
        assert loaded.config == tiny_model.config
        for (na, a), (nb, b) in zip(
            tiny_model.state_dict().items(), loaded.state_dict().items()
        ):
            assert na == nb
            assert torch.equal(a.float(), b)

    def test_tampered_payload_detected(self, tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_model, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptFile):
            load_checkpoint(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(UnsupportedFormat):
            load_checkpoint(path)
