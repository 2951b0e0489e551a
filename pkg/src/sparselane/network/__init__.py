from .backbone import ConvBackbone
from .decoder import (AnchorEmbedding, AnchorGeometry, ContextSampling,
                      CurveCrossAttention, DecoderLayer, ModelConfig,
                      PositionalEmbed, QueryState, level_coords,
                      project_anchors, range_from_logits, range_to_logits)
from .detector import CurveLaneDetector, LanePrediction, ModelOutput, rig_tensors
from .layers import MLP, MultiHeadAttention, bilinear_gather, inverse_sigmoid, sinusoidal_embed

__all__ = [
    "AnchorEmbedding", "AnchorGeometry", "ContextSampling", "ConvBackbone",
    "CurveCrossAttention", "CurveLaneDetector", "DecoderLayer", "LanePrediction",
    "MLP", "ModelConfig", "ModelOutput", "MultiHeadAttention", "PositionalEmbed",
    "QueryState", "bilinear_gather", "inverse_sigmoid", "level_coords",
    "project_anchors", "range_from_logits", "range_to_logits", "rig_tensors",
    "sinusoidal_embed",
]
