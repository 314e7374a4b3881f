"""ONNX model ingestion for the sharding planner.

Reads .onnx files with a self-contained protobuf wire codec and emits the
planner's schema-1 JSON graph format.
"""

from .convert import OP_MAPPING, ConversionReport, UnsupportedModel, export_graph
from .model import ModelParseError, parse_model

__all__ = [
    "OP_MAPPING",
    "ConversionReport",
    "UnsupportedModel",
    "export_graph",
    "ModelParseError",
    "parse_model",
]

__version__ = "0.1.0"
