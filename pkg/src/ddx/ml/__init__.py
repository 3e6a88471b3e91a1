"""Token encoding and the two learned rankers (logistic regression, temporal convnet)."""
