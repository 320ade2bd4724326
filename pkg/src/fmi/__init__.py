"""Feature matching intervention for out-of-distribution generalization."""
