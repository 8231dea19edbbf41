"""
Optional imports and constants shared across the alignment lab
"""

# Import libraries with error handling
try:
    import torchvision
    TORCHVISION_AVAILABLE = True
except ImportError:
    torchvision = None
    TORCHVISION_AVAILABLE = False

try:
    import cv2
    CV2_AVAILABLE = True
except ImportError:
    cv2 = None
    CV2_AVAILABLE = False

try:
    from tqdm import tqdm
except ImportError:
    def tqdm(iterable=None, **kwargs):
        return iterable

# NOTE: Do NOT import matplotlib.pyplot at module import time here.
# pyplot picks a GUI backend on first import; the plotting helpers select the
# Agg backend lazily (src/training/history.py, src/evaluation/reports.py).
try:
    import matplotlib  # noqa: F401
    MATPLOTLIB_AVAILABLE = True
except ImportError:
    MATPLOTLIB_AVAILABLE = False


# Physical and protocol constants shared across packages
CANVAS_SIDE = 90
NUM_FOVS = 5
FEATURE_DIM = 512
SCHEMA_VERSION = 1
