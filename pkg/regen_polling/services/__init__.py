"""Business logic: one module per part of the model, plus the experiment pipelines."""
