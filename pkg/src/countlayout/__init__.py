"""countlayout: instance localization from attention tensors, layout
correction to a target object count, and layout-guided loss machinery."""

__version__ = "0.1.0"

from .localize import InstanceLayout, ForegroundMask, count_instances  # noqa: F401
from .tensor_io import AttentionBundle, read_bundle, read_blob, write_blob  # noqa: F401
