"""Low-rank gradient projection optimizers (GaLore, GaLore+) and their experiment harness"""
