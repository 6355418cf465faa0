"""Shared helpers for the test suite."""

import os
import re

import numpy as np

from flowlab.fields import make_field_set


def const_set(dim, vectors):
    coeffs = [[(tuple([0] * dim), np.asarray(v, float), np.zeros(dim))]
              for v in vectors]
    return make_field_set(dim, len(vectors) - 1, coefficients=coeffs)


def strip_timestamps(text: str) -> str:
    return re.sub(r'("generated_at": "[^"]*"|# generated_at: .*)', "", text)


def collect_outputs(out_dir):
    files = {}
    for name in sorted(os.listdir(out_dir)):
        with open(os.path.join(out_dir, name)) as fh:
            files[name] = strip_timestamps(fh.read())
    return files
