"""Multi-stage influence functions for pretrain/finetune pipelines."""

__version__ = "0.1.0"
