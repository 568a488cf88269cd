"""Flow-based Riemannian iterative posterior sampling."""
