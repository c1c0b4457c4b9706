from enum import IntEnum, StrEnum, unique

# Audio
SAMPLE_RATE = 8000
FRAME_RATE = 25
CLIP_SECONDS = 5.0
HOP = SAMPLE_RATE // FRAME_RATE
N_FFT = 1024
N_FRAMES = round(CLIP_SECONDS * FRAME_RATE)

# Onset analysis runs on a finer grid than the latent frames
ONSET_N_FFT = 256
ONSET_HOP = 64
ONSET_MIN_GAP = 0.05

# Pitch
MIDI_MIN, MIDI_MAX = 43, 107
N_MELODY_BINS = 53
MELODY_BIN_MIDI = tuple(range(MIDI_MIN, MIDI_MIN + N_MELODY_BINS))
SALIENCE_HARMONICS = 4
SALIENCE_DECAY = 0.8
REST = -1

PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

# Chords: 0 is no-chord, 1..12 major, 13..24 minor
NO_CHORD = 0
N_CHORDS = 25
CHORD_THRESHOLD = 0.3
CHORD_MEDIAN = 5

# Styles
N_STYLES = 8

# Codec
N_ENC = 16
MEL_BANDS = 64
RVQ_CODEBOOKS = 4
RVQ_SIZE = 64
KMEANS_ITERS = 20
LOG_FLOOR = 1e-5

# Conditioning
D_CRD = 16
D_MLD = 16
D_AUD = 1
D_DRM = 2
BLUR_AUDIO = 5
BLUR_DRUMS = 3
BPF_LOW, BPF_HIGH = 200.0, 800.0
IOP_FRACTION_MIN, IOP_FRACTION_MAX = 0.4, 0.9
LOCAL_TOKENS = 32

# Flow matching
SIGMA_MIN = 1e-5


@unique
class ChordQuality(IntEnum):
    MAJOR = 0
    MINOR = 1


@unique
class Control(StrEnum):
    CHORDS = "chords"
    MELODY = "melody"
    AUDIO = "audio"
    DRUMS = "drums"
    INPAINT = "inpaint"


LOCAL_CONTROLS = tuple(Control)


class InterpMode(StrEnum):
    NEAREST = "nearest"
    LINEAR = "linear"


class PaintMode(StrEnum):
    INPAINT = "inpaint"
    OUTPAINT = "outpaint"


class LossWeighting(StrEnum):
    UNIFORM = "uniform"
    ONE_PLUS_T = "one_plus_t"


class Conditioning(StrEnum):
    CONCAT = "concat"
    CROSS_ATTENTION = "cross_attention"


class ChordReference(StrEnum):
    AUDIO = "audio"
    ANNOTATION = "annotation"


class Command(StrEnum):
    SYNTH = "synth"
    FIT_CODEC = "fit-codec"
    TRAIN = "train"
    GENERATE = "generate"
    EVALUATE = "evaluate"
    ABLATE = "ablate"
    SWEEP_GUIDANCE = "sweep-guidance"
    PREVIEW = "preview"


class AblationAxis(StrEnum):
    LOSS_WEIGHTING = "loss_weighting"
    CONDITIONING = "conditioning"
    CONTROLS = "controls"
