"""Deep and linear subspace models for imputing sparsely observed images."""
