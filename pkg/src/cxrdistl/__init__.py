"""Semi-supervised teacher-student ViT for chest radiograph disease and symptom recognition."""

__version__ = "0.1.0"
