"""Shared fixtures: a small on-disk cohort and compact model specs."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # expose helpers.py to tests

from modfuse.datagen import CohortConfig, generate_cohort
from modfuse.encoders import ImgEncoderSpec, SeqEncoderSpec, init_bundle
from modfuse.ingest import load_cohort

TINY_SEQ = SeqEncoderSpec(input_dim=34, hidden_dim=8)
TINY_IMG = ImgEncoderSpec(in_channels=1, image_side=32, stages=((2, 1), (2, 1), (4, 1)))


@pytest.fixture(scope="session")
def tiny_cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_cohort")
    config = CohortConfig(n_subjects=40, seed=123, pairing_rate=0.5,
                          stays_min=1, stays_max=2, image_side=32)
    generate_cohort(config, out)
    return out


@pytest.fixture(scope="session")
def tiny_cohort(tiny_cohort_dir):
    return load_cohort(tiny_cohort_dir)


def tiny_bundle(seed=0):
    return init_bundle(seed, TINY_SEQ, TINY_IMG, unified_hidden=8)


@pytest.fixture
def fresh_bundle():
    return tiny_bundle()
