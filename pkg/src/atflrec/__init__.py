"""Audio and text LoRA fine-tuning for few-shot recommendation, on numpy."""

__version__ = "0.1.0"
