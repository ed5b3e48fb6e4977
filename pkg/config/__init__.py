# Configuration package for the SOLVE-GP trainer
