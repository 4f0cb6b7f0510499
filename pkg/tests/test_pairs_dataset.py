"""属性レジストリ・ペア展開・分割衛生チェックのテスト"""

import itertools
from pathlib import Path

import numpy as np
import pytest

from config import Config, derive_seed
from errors import ConfigurationError, FormatError, InputError
from models import PairExample, SpeakerPairAnnotation, UtteranceRecord
from pairs_dataset import (
    attribute_index,
    attribute_labels,
    attribute_name,
    build_pairs,
    read_annotations,
    read_manifest,
    read_pairs,
    split_check,
    write_annotations,
    write_manifest,
    write_pairs,
)


def _utterances(speakers, per_speaker, gender="male"):
    return [UtteranceRecord(f"{s}_{i:03d}", s, gender) for s in speakers for i in range(per_speaker)]


def _speaker_of(records):
    return {r.utterance_id: r.speaker_id for r in records}


class TestAttributeRegistry:

    def test_layout(self):
        first = Config.DESCRIPTORS[0]
        assert attribute_index(first, "male") == 0
        assert attribute_index(first, "female") == 17
        assert attribute_index("Bright", "male") == 0 and attribute_index("Bright", "female") == 17

    def test_bijection(self):
        indices = [attribute_index(d, g) for g in Config.GENDERS for d in Config.DESCRIPTORS]
        assert sorted(indices) == list(range(34))
        for i in range(34):
            assert attribute_index(*attribute_name(i)) == i

    def test_labels(self):
        labels = attribute_labels()
        assert len(labels) == 34
        assert labels[0] == "Bright/male" and labels[17] == "Bright/female"

    def test_custom_registry(self):
        names = [f"D{i}" for i in range(17)]
        assert attribute_index("D3", "female", names) == 20

    @pytest.mark.parametrize("descriptor,gender", [("Loud", "male"), ("Bright", "other")])
    def test_unknown(self, descriptor, gender):
        with pytest.raises(InputError):
            attribute_index(descriptor, gender)

    def test_index_out_of_range(self):
        with pytest.raises(InputError):
            attribute_name(34)


class TestBuildPairs:

    def test_single_annotation_four_examples(self):
        utts = _utterances(["a", "b"], 5)
        ann = [SpeakerPairAnnotation("a", "b", "Thin", "b_stronger")]
        pairs = build_pairs(ann, utts, pairs_per_speaker_pair=4, include_reverse=True, seed=42)
        assert len(pairs) == 4

        # 25通りの直積から重複なしで2件を引き、各々の逆順を続ける
        cross = [(ua, ub) for ua in [f"a_{i:03d}" for i in range(5)] for ub in [f"b_{i:03d}" for i in range(5)]]
        drawn = np.random.default_rng(derive_seed(42, "pairs", 0)).choice(25, size=2, replace=False)
        expected = []
        for flat in drawn:
            ua, ub = cross[int(flat)]
            expected += [(ua, ub), (ub, ua)]
        assert [(p.utt_a, p.utt_b) for p in pairs] == expected
        assert expected[0] != expected[2]

        idx = attribute_index("Thin", "male")
        assert [int(p.labels[idx]) for p in pairs] == [1, 0, 1, 0]
        for p in pairs:
            assert p.mask.sum() == 1 and p.mask[idx] == 1
            assert p.gender == "male"

    def test_a_stronger_label(self):
        utts = _utterances(["a", "b"], 3)
        pairs = build_pairs([SpeakerPairAnnotation("a", "b", "Low", "a_stronger")], utts, 2, seed=1)
        idx = attribute_index("Low", "male")
        assert pairs[0].labels[idx] == 0 and pairs[1].labels[idx] == 1

    def test_deterministic_and_seed_sensitive(self, synthetic_dataset):
        ds = synthetic_dataset
        a = build_pairs(ds.train_annotations, ds.train_records, seed=42)
        b = build_pairs(ds.train_annotations, ds.train_records, seed=42)
        c = build_pairs(ds.train_annotations, ds.train_records, seed=43)
        assert [(p.utt_a, p.utt_b) for p in a] == [(p.utt_a, p.utt_b) for p in b]
        assert all(np.array_equal(p.labels, q.labels) for p, q in zip(a, b))
        assert [(p.utt_a, p.utt_b) for p in a] != [(p.utt_a, p.utt_b) for p in c]

    def test_reversal_consistency(self, synthetic_dataset):
        ds = synthetic_dataset
        pairs = build_pairs(ds.train_annotations, ds.train_records, seed=7)
        for forward, reverse in zip(pairs[0::2], pairs[1::2]):
            assert (reverse.utt_a, reverse.utt_b) == (forward.utt_b, forward.utt_a)
            np.testing.assert_array_equal(forward.mask, reverse.mask)
            m = forward.mask == 1
            np.testing.assert_array_equal(forward.labels[m] + reverse.labels[m], 1)

    def test_mask_confined_to_gender(self, synthetic_dataset):
        ds = synthetic_dataset
        gender_of = {r.utterance_id: r.gender for r in ds.records}
        for p in build_pairs(ds.train_annotations, ds.train_records, seed=3):
            assert gender_of[p.utt_a] == gender_of[p.utt_b] == p.gender
            other = slice(17, 34) if p.gender == "male" else slice(0, 17)
            assert p.mask[other].sum() == 0
            assert p.mask.sum() >= 1
            assert np.all(p.labels[p.mask == 0] == 0)

    def test_multi_descriptor_merge(self):
        utts = _utterances(["a", "b"], 4, gender="female")
        ann = [
            SpeakerPairAnnotation("a", "b", "Bright", "b_stronger"),
            SpeakerPairAnnotation("b", "a", "Husky", "b_stronger"),
        ]
        pairs = build_pairs(ann, utts, pairs_per_speaker_pair=6, seed=0)
        assert len(pairs) == 6
        bright, husky = attribute_index("Bright", "female"), attribute_index("Husky", "female")
        first = pairs[0]
        assert first.mask.sum() == 2 and first.mask[bright] == first.mask[husky] == 1
        # 2行目は b, a の向きなので a 基準では a_stronger
        assert first.labels[bright] == 1 and first.labels[husky] == 0

    def test_without_replacement_when_possible(self):
        utts = _utterances(["a", "b"], 5)
        pairs = build_pairs([SpeakerPairAnnotation("a", "b", "Pure", "b_stronger")], utts, 50, seed=9)
        forward = [(p.utt_a, p.utt_b) for p in pairs[0::2]]
        assert len(set(forward)) == 25

    def test_small_cross_product_uses_replacement(self):
        utts = _utterances(["a", "b"], 2)
        pairs = build_pairs([SpeakerPairAnnotation("a", "b", "Pure", "b_stronger")], utts, 40, seed=9)
        assert len(pairs) == 40

    def test_without_reverse(self):
        utts = _utterances(["a", "b"], 5)
        pairs = build_pairs([SpeakerPairAnnotation("a", "b", "Pure", "b_stronger")], utts, 5,
                            include_reverse=False, seed=9)
        assert len(pairs) == 5 and all(p.utt_a.startswith("a_") for p in pairs)

    @pytest.mark.parametrize("groups,per,total", [(3408, 40, 136320), (229, 400, 91600), (235, 400, 94000)])
    def test_count_arithmetic(self, groups, per, total):
        speakers = [f"s{i:03d}" for i in range(84)]
        combos = list(itertools.islice(itertools.combinations(speakers, 2), groups))
        assert len(combos) == groups
        ann = [SpeakerPairAnnotation(a, b, "Bright", "b_stronger") for a, b in combos]
        pairs = build_pairs(ann, _utterances(speakers, 5), pairs_per_speaker_pair=per, seed=42)
        assert len(pairs) == total

    def test_odd_pairs_per_with_reverse(self):
        with pytest.raises(ConfigurationError):
            build_pairs([], [], pairs_per_speaker_pair=5, include_reverse=True)

    def test_missing_speaker(self):
        with pytest.raises(InputError):
            build_pairs([SpeakerPairAnnotation("a", "z", "Pure", "b_stronger")], _utterances(["a"], 3), 4)

    def test_gender_mismatch(self):
        utts = _utterances(["a"], 3) + _utterances(["b"], 3, gender="female")
        with pytest.raises(InputError):
            build_pairs([SpeakerPairAnnotation("a", "b", "Pure", "b_stronger")], utts, 4)

    def test_conflicting_labels(self):
        ann = [
            SpeakerPairAnnotation("a", "b", "Pure", "b_stronger"),
            SpeakerPairAnnotation("b", "a", "Pure", "b_stronger"),
        ]
        with pytest.raises(InputError):
            build_pairs(ann, _utterances(["a", "b"], 3), 4)


class TestFiles:

    def test_manifest_roundtrip(self, tmp_path):
        wav = tmp_path / "wav"
        records = [UtteranceRecord("a_001", "a", "male", str(wav / "a_001.wav")),
                   UtteranceRecord("b_001", "b", "female", str(wav / "b_001.wav"))]
        path = tmp_path / "manifest.tsv"
        write_manifest(records, str(path), {"artifact_version": "x"})
        assert "wav/a_001.wav" in path.read_text(encoding="utf-8")
        back = read_manifest(str(path))
        assert [(r.utterance_id, r.speaker_id, r.gender) for r in back] == \
            [(r.utterance_id, r.speaker_id, r.gender) for r in records]
        for r, s in zip(back, records):
            assert Path(r.path).resolve() == Path(s.path).resolve()

    def test_manifest_duplicate_id(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("utterance_id\tspeaker_id\tgender\tpath\nu\ta\tmale\tx.wav\nu\ta\tmale\ty.wav\n",
                        encoding="utf-8")
        with pytest.raises(InputError):
            read_manifest(str(path))

    @pytest.mark.parametrize("text", [
        "utt\tspeaker_id\tgender\tpath\n",
        "utterance_id\tspeaker_id\tgender\tpath\nu\ta\tmale\n",
    ])
    def test_manifest_format_errors(self, text, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(FormatError):
            read_manifest(str(path))

    def test_annotation_roundtrip_and_validation(self, tmp_path):
        ann = [SpeakerPairAnnotation("a", "b", "Sweet", "a_stronger")]
        path = tmp_path / "ann.tsv"
        write_annotations(ann, str(path))
        assert read_annotations(str(path)) == ann
        path.write_text("speaker_a\tspeaker_b\tdescriptor\tdirection\na\ta\tSweet\tb_stronger\n", encoding="utf-8")
        with pytest.raises(InputError):
            read_annotations(str(path))

    def test_pairs_roundtrip(self, tmp_path, synthetic_dataset):
        ds = synthetic_dataset
        pairs = build_pairs(ds.train_annotations, ds.train_records, pairs_per_speaker_pair=4, seed=1)
        path = tmp_path / "pairs.tsv"
        assert write_pairs(pairs, str(path), provenance={"artifact_version": "x"}) == len(pairs)
        back = read_pairs(str(path), ds.speaker_of)
        assert len(back) == len(pairs)
        for p, q in zip(pairs, back):
            assert (p.utt_a, p.utt_b, p.gender, p.speaker_a, p.speaker_b) == \
                (q.utt_a, q.utt_b, q.gender, q.speaker_a, q.speaker_b)
            np.testing.assert_array_equal(p.labels, q.labels)
            np.testing.assert_array_equal(p.mask, q.mask)

    def test_pairs_empty_mask_rejected(self, tmp_path):
        empty = PairExample("a", "b", np.zeros(34, np.int8), np.zeros(34, np.int8), "male")
        path = tmp_path / "pairs.tsv"
        write_pairs([empty], str(path))
        with pytest.raises(InputError):
            read_pairs(str(path))


def _pair(ua, ub, sa="", sb=""):
    mask = np.zeros(34, np.int8)
    mask[0] = 1
    return PairExample(ua, ub, np.zeros(34, np.int8), mask, "male", sa, sb)


class TestSplitCheck:

    def test_disjoint(self):
        train = [_pair("a1", "b1", "a", "b")]
        eval_ = [_pair("c1", "d1", "c", "d")]
        for protocol in ("seen", "unseen"):
            assert split_check(train, eval_, protocol).ok

    def test_unordered_speaker_pair(self):
        report = split_check([_pair("a1", "b1", "a", "b")], [_pair("b2", "a2", "b", "a")], "seen")
        assert [(v.kind, v.key) for v in report.violations] == [("speaker_pair", ["a", "b"])]

    def test_seen_shared_utterance(self):
        report = split_check([_pair("a1", "b1", "a", "b")], [_pair("a1", "c1", "a", "c")], "seen")
        assert [(v.kind, v.key) for v in report.violations] == [("utterance", ["a1"])]

    def test_unseen_shared_speaker(self):
        report = split_check([_pair("a1", "b1", "a", "b")], [_pair("a2", "c1", "a", "c")], "unseen")
        assert [(v.kind, v.key) for v in report.violations] == [("speaker", ["a"])]

    def test_speaker_lookup(self):
        speaker_of = {"a1": "a", "b1": "b", "c1": "c", "d1": "d"}
        assert split_check([_pair("a1", "b1")], [_pair("c1", "d1")], "unseen", speaker_of).ok
        with pytest.raises(InputError):
            split_check([_pair("a1", "x9")], [], "seen", speaker_of)

    def test_unknown_protocol(self):
        with pytest.raises(ConfigurationError):
            split_check([], [], "mixed")

    def test_synthetic_fixture_is_clean(self, synthetic_dataset):
        ds = synthetic_dataset
        train = build_pairs(ds.train_annotations, ds.train_records, 4, seed=1)
        held_out = build_pairs(ds.train_annotations, ds.eval_records, 4, seed=2)
        unseen = build_pairs(ds.eval_annotations, ds.eval_records, 4, seed=3)
        # 学習と同じ話者ペアを別発話で評価すると話者ペアの重複として報告される
        assert not split_check(train, held_out, "seen", ds.speaker_of).ok
        assert split_check(train, unseen, "seen", ds.speaker_of).ok

    def test_adversarial_fixtures(self):
        """ランダムな50組で総当たりの期待値と一致する"""
        rng = np.random.default_rng(11)
        speakers = [f"s{i}" for i in range(6)]
        for _ in range(50):
            sets = []
            for _ in range(2):
                pairs = []
                for _ in range(int(rng.integers(1, 5))):
                    a, b = rng.choice(speakers, size=2, replace=False)
                    pairs.append(_pair(f"{a}_{rng.integers(3)}", f"{b}_{rng.integers(3)}", str(a), str(b)))
                sets.append(pairs)
            train, eval_ = sets

            def unordered(ps):
                return {tuple(sorted((p.speaker_a, p.speaker_b))) for p in ps}

            def utts(ps):
                return {u for p in ps for u in (p.utt_a, p.utt_b)}

            def spks(ps):
                return {s for p in ps for s in (p.speaker_a, p.speaker_b)}

            shared_pairs = unordered(train) & unordered(eval_)
            seen = split_check(train, eval_, "seen")
            assert {tuple(v.key) for v in seen.violations if v.kind == "speaker_pair"} == shared_pairs
            assert {v.key[0] for v in seen.violations if v.kind == "utterance"} == utts(train) & utts(eval_)
            unseen = split_check(train, eval_, "unseen")
            assert {v.key[0] for v in unseen.violations if v.kind == "speaker"} == spks(train) & spks(eval_)
            assert seen.ok == (not shared_pairs and not (utts(train) & utts(eval_)))
