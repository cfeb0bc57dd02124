"""Cross-modal collaborative representation learning for multimodal crowd counting."""
