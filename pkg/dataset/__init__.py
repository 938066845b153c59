"""Image records, dataset files and the synthetic generator."""
