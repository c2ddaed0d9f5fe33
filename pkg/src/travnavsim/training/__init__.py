"""Self-supervised dataset assembly, losses and the training loop."""
