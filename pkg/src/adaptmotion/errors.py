"""Exception types raised across the package.

Everything derives from ``ValueError`` so callers that only care about bad
input can catch that; the CLI maps these to exit code 1.
"""


class AdaptMotionError(ValueError):
    pass


# pose
class DegenerateRotation(AdaptMotionError):
    pass


class NotARotation(AdaptMotionError):
    pass


class NormalizedInput(AdaptMotionError):
    pass


class StatsMismatch(AdaptMotionError):
    pass


# encoders
class EmptyPrompt(AdaptMotionError):
    pass


class EmptyAudio(AdaptMotionError):
    pass


class BadTiming(AdaptMotionError):
    pass


class LengthMismatch(AdaptMotionError):
    pass


class MissingObject(AdaptMotionError):
    pass


# denoiser / diffusion
class ShapeMismatch(AdaptMotionError):
    pass


class MissingCondition(AdaptMotionError):
    pass


class NoTrace(AdaptMotionError):
    pass


class StepOutOfRange(AdaptMotionError):
    pass


class BadWindow(AdaptMotionError):
    pass


# metrics
class DimensionMismatch(AdaptMotionError):
    pass


class NotPSD(AdaptMotionError):
    pass


class ClipTooShort(AdaptMotionError):
    pass


class TooFewSamples(AdaptMotionError):
    pass


class EmptyClip(AdaptMotionError):
    pass


# harness
class UnreachableGoal(AdaptMotionError):
    pass


class BadBeats(AdaptMotionError):
    pass


class MissingPrereq(AdaptMotionError):
    pass


class DataMismatch(AdaptMotionError):
    pass
