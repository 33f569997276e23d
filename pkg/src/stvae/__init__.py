"""Weighted-variance (Student-t) VAE speech modelling and EM speech enhancement."""
