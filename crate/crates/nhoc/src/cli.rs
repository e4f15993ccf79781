// placeholder, filled in after the core layers
