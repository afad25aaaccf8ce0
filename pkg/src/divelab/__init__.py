"""Region-guided image synthesis against a simulated, planted-truth subject."""
