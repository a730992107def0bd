"""Parameter-efficient NER at desk scale: LoRA-adapted encoders, BIO tagging, TPE search."""

__version__ = "0.1.0"
