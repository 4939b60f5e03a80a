"""Pod and seed counting: detection with domain adaptation, synthetic data, pipelines, evaluation."""
from .core import Box, CountResult, Detection, Domain, ImageRecord, InstanceAnnotation, SppClass

__all__ = ["Box", "CountResult", "Detection", "Domain", "ImageRecord", "InstanceAnnotation", "SppClass"]
__version__ = "0.1.0"
