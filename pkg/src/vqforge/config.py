"""Default hyperparameters and bit-width presets."""

# bits per weight -> (codebook size k, sub-vector length d)
BIT_PRESETS = {
    3: (64, 2),
    2: (256, 4),
    1: (256, 8),
}

LR_CODEBOOK = 1e-5
LR_SCORES = 5e-2
REPLACE_THRESHOLD = 1e-2
CONFIRM_THRESHOLD = 0.99
NUM_CANDIDATES = 4

ADAMAX_BETA1 = 0.9
ADAMAX_BETA2 = 0.999
ADAMAX_EPS = 1e-8

KMEANS_MAX_ITERS = 100
KMEANS_TOL = 1e-6

CALIB_SAMPLES = 4096
HIST_BIN_WIDTH = 0.05


def preset(bits):
    """Return ``(k, d)`` for a 1/2/3-bit preset."""
    try:
        return BIT_PRESETS[bits]
    except KeyError:
        raise ValueError(f"no preset for {bits}-bit; choose from {sorted(BIT_PRESETS)}") from None
