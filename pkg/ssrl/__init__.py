"""ssrl-desk: self-supervised reflective learning on synthetic speaker data."""
