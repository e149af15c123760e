"""Two-step noise-robust multi-source domain adaptation"""
