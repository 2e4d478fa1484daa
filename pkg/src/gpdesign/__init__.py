"""Goal-oriented adaptive Gaussian-process surrogates for parameter identification."""
