# nnQC modules package
