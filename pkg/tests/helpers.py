"""Small shared builders for the test suite."""
import numpy as np

# entries more than three orders below a gradient's largest entry are compared
# on an absolute basis (see max_relative_error)
REL_FLOOR = 1e-3


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
