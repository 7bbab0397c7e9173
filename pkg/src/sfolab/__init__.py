"""sfolab: pairwise fine-tuning of toy flow-matching models against synthesized negatives."""

__version__ = "0.1.0"
