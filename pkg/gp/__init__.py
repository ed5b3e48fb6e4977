# Numerical core: kernels, exact GP oracle, variational factors, SVGP, SOLVE-GP, deep SOLVE-GP
