"""Multi-critic PPO with a Beta policy and the DHA latent as actor input."""
