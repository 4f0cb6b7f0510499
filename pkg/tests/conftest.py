"""scripts/ をインポートパスに追加する（CLI と同じ方式）"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))

from synthetic_fixture import make_synthetic_dataset  # noqa: E402


@pytest.fixture(scope="session")
def synthetic_dataset():
    return make_synthetic_dataset()


@pytest.fixture(scope="session")
def synthetic_stacks(synthetic_dataset):
    """合成データの全発話の LayerStack（L=5, D=64）。dict は get(uid) を持つのでそのまま provider になる"""
    from feature_provider import synth_layer_stack

    ds = synthetic_dataset
    return {
        r.utterance_id: synth_layer_stack(r.utterance_id, 42, ds.profiles[r.speaker_id], num_layers=5, dim=64)
        for r in ds.records
    }
