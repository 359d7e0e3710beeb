"""Shared fixtures: a small synthetic corpus reused across test modules."""

import numpy as np
import pytest

from streamsv import build_synth_corpus, load_manifest, load_trial_list


@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory):
    """4 speakers x 4 utterances x 3 s: 8 training utts, 8 held-out."""
    root = tmp_path_factory.mktemp("smoke_corpus")
    manifest_path, trials_path = build_synth_corpus(
        root, n_speakers=4, utts_per_speaker=4, seconds=3.0, seed=11
    )
    return {
        "root": root,
        "manifest_path": manifest_path,
        "trials_path": trials_path,
        "manifest": load_manifest(manifest_path),
        "trials": load_trial_list(trials_path),
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
