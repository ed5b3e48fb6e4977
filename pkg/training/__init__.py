# Parameter transforms, optimizer, training loop and model files
