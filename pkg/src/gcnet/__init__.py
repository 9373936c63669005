"""GCNet: graph-based classification and imputation for conversational
multimodal data with randomly missing modalities."""

__version__ = "0.1.0"
