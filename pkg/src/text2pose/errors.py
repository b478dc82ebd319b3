"""Exception types raised across the package."""


class Text2PoseError(Exception):
    """Base class for all package errors."""


# skeleton / rendering
class InvalidRenderSize(Text2PoseError):
    pass


# heatmap codec
class GridTooSmall(Text2PoseError):
    pass


class InvalidSigma(Text2PoseError):
    pass


class NonFiniteHeatmap(Text2PoseError):
    pass


class UnsupportedFormat(Text2PoseError):
    pass


class CorruptFile(Text2PoseError):
    pass


# text embedding
class EmptyCaption(Text2PoseError):
    pass


class UnknownTokenId(Text2PoseError):
    pass


class MissingEmbedding(Text2PoseError):
    pass


class InconsistentDimension(Text2PoseError):
    pass


# diffusion
class InvalidSchedule(Text2PoseError):
    pass


class InvalidTimestep(Text2PoseError):
    pass


class ShapeMismatch(Text2PoseError):
    pass


class FinalStepNoise(Text2PoseError):
    pass


class DivergedSampling(Text2PoseError):
    pass


# denoiser
class InvalidGrouping(Text2PoseError):
    pass


class NonFiniteInput(Text2PoseError):
    pass


# dataset
class ParseError(Text2PoseError):
    pass


class EmptyDataset(Text2PoseError):
    pass


# training / evaluation
class DivergedTraining(Text2PoseError):
    pass


class DegenerateSamples(Text2PoseError):
    pass
