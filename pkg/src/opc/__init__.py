"""Occupancy-based policy compression: curate random policies by their
contribution to state-visitation entropy, compress them with an
autoencoder trained on a mixture-occupancy KL, then search the latent
space with PGPE."""

__version__ = "0.1.0"
