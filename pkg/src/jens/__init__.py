"""Jacobian-regularized ensembles and universal adversarial perturbations."""
