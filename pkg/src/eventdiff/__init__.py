"""Diffusion models of chaotic trajectories with event conditioning."""
