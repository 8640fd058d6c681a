"""Masked discrete diffusion over joint text/image tokens, with CoT finetuning and group-relative RL."""

__version__ = "0.1.0"
