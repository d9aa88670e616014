import json
import struct

import numpy as np
import pytest

from scrc.datastore import (FeatureStore, build_training_tuples, load_annotations,
                            load_captions, load_checkpoint, load_feature_store,
                            load_proposals, save_checkpoint, save_feature_store)
from scrc.errors import FormatError, InputError
from scrc.model import ScrcConfig, ScrcParams
from scrc.nncore import make_rng
from scrc.textproc import build_vocab


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def annotation_row(**overrides):
    row = {"image_id": "img1", "width": 200, "height": 100,
           "box": [10, 10, 60, 60], "region_key": "img1:r0",
           "descriptions": ["red box"]}
    row.update(overrides)
    return row


class TestFeatureStore:
    def test_empty_roundtrip(self, tmp_path):
        path = tmp_path / "f.bin"
        save_feature_store(FeatureStore(4), path)
        loaded = load_feature_store(path)
        assert loaded.dim == 4
        assert len(loaded) == 0

    def test_single_entry_roundtrip_bit_exact(self, tmp_path):
        store = FeatureStore(4)
        store.add("img1", [1.0, 2.0, 3.0, 4.0])
        path = tmp_path / "f.bin"
        save_feature_store(store, path)
        loaded = load_feature_store(path)
        assert np.array_equal(loaded.get("img1"), store.get("img1"))
        assert loaded.get("img1").dtype == np.float32

    def test_many_entries_roundtrip(self, tmp_path):
        rng = make_rng(0)
        store = FeatureStore(16)
        for k in range(50):
            store.add(f"key-{k}", rng.normal(size=16).astype(np.float32))
        path = tmp_path / "f.bin"
        save_feature_store(store, path)
        loaded = load_feature_store(path)
        assert list(loaded.entries) == list(store.entries)
        for k in store.entries:
            assert np.array_equal(loaded.get(k), store.get(k))

    def test_truncation_names_offset(self, tmp_path):
        store = FeatureStore(4)
        store.add("img1", [1, 2, 3, 4])
        store.add("img2", [5, 6, 7, 8])
        path = tmp_path / "f.bin"
        save_feature_store(store, path)
        data = path.read_bytes()
        cut = tmp_path / "cut.bin"
        cut.write_bytes(data[:-7])
        with pytest.raises(FormatError, match=r"byte \d+"):
            load_feature_store(cut)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 12)
        with pytest.raises(FormatError, match="magic"):
            load_feature_store(path)

    def test_bad_version(self, tmp_path):
        store = FeatureStore(2)
        path = tmp_path / "f.bin"
        save_feature_store(store, path)
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", 9)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            load_feature_store(path)

    def test_duplicate_key_in_file(self, tmp_path):
        path = tmp_path / "f.bin"
        with open(path, "wb") as f:
            f.write(b"SCRCFEAT")
            f.write(struct.pack("<III", 1, 1, 2))
            for _ in range(2):
                f.write(struct.pack("<H", 1) + b"k" + struct.pack("<f", 1.0))
        with pytest.raises(FormatError, match="duplicate key"):
            load_feature_store(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "f.bin"
        save_feature_store(FeatureStore(2), path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(FormatError, match="trailing"):
            load_feature_store(path)

    def test_missing_key_named(self):
        store = FeatureStore(2)
        with pytest.raises(InputError, match="nope"):
            store.get("nope")

    def test_duplicate_add_rejected(self):
        store = FeatureStore(2)
        store.add("a", [1, 2])
        with pytest.raises(InputError, match="duplicate"):
            store.add("a", [3, 4])


class TestAnnotations:
    def test_three_valid_lines_in_order(self, tmp_path):
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(region_key=f"img1:r{i}") for i in range(3)])
        records = load_annotations(path)
        assert [r.region_key for r in records] == ["img1:r0", "img1:r1", "img1:r2"]

    def test_multiple_descriptions_kept(self, tmp_path):
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(descriptions=["red box", "crimson square"])])
        records = load_annotations(path)
        assert len(records) == 1
        assert len(records[0].descriptions) == 2

    def test_invalid_box_names_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(),
                           annotation_row(box=[60, 10, 60, 60])])
        with pytest.raises(FormatError, match="line 2"):
            load_annotations(path)

    def test_box_outside_image_names_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(box=[10, 10, 250, 60])])
        with pytest.raises(FormatError, match="line 1"):
            load_annotations(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_text(json.dumps(annotation_row()) + "\n{oops\n")
        with pytest.raises(FormatError, match="line 2"):
            load_annotations(path)

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        row = annotation_row()
        del row["region_key"]
        write_jsonl(path, [row])
        with pytest.raises(FormatError, match="region_key"):
            load_annotations(path)

    def test_empty_descriptions_rejected(self, tmp_path):
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(descriptions=[])])
        with pytest.raises(FormatError, match="descriptions"):
            load_annotations(path)


class TestProposalsAndCaptions:
    def test_proposals_roundtrip(self, tmp_path):
        path = tmp_path / "p.jsonl"
        write_jsonl(path, [{"image_id": "img1",
                            "boxes": [[0, 0, 5, 5], [2, 2, 8, 9]],
                            "region_keys": ["a", "b"]}])
        sets = load_proposals(path)
        assert len(sets) == 1
        assert sets[0].region_keys == ["a", "b"]
        assert sets[0].boxes[1].y_max == 9

    def test_length_mismatch_names_line(self, tmp_path):
        path = tmp_path / "p.jsonl"
        write_jsonl(path, [{"image_id": "img1", "boxes": [[0, 0, 5, 5]],
                            "region_keys": ["a", "b"]}])
        with pytest.raises(FormatError, match="line 1"):
            load_proposals(path)

    def test_keeps_top_max_boxes(self, tmp_path):
        path = tmp_path / "p.jsonl"
        write_jsonl(path, [{"image_id": "img1",
                            "boxes": [[k, 0, k + 1, 1] for k in range(7)],
                            "region_keys": [f"r{k}" for k in range(7)]}])
        sets = load_proposals(path, max_boxes=5)
        assert len(sets[0].boxes) == 5
        assert sets[0].region_keys == [f"r{k}" for k in range(5)]

    def test_captions(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_jsonl(path, [{"image_id": "img1", "captions": ["a dog", "the dog"]}])
        records = load_captions(path)
        assert records[0].captions == ["a dog", "the dog"]

    def test_empty_captions_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_jsonl(path, [{"image_id": "img1", "captions": []}])
        with pytest.raises(FormatError, match="line 1"):
            load_captions(path)


class TestTrainingTuples:
    def stores(self):
        region = FeatureStore(3)
        region.add("img1:r0", [1, 0, 0])
        region.add("img1:r1", [0, 1, 0])
        context = FeatureStore(3)
        context.add("img1", [1, 1, 0])
        return region, context

    def test_tuple_count_is_description_count(self, tmp_path):
        region, context = self.stores()
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(descriptions=["one"]),
                           annotation_row(region_key="img1:r1",
                                          descriptions=["a", "b", "c"])])
        vocab = build_vocab(["one a b c"])
        tuples = build_training_tuples(load_annotations(path), region, context, vocab)
        assert len(tuples) == 4

    def test_full_image_box_spatial(self, tmp_path):
        region, context = self.stores()
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(box=[0, 0, 200, 100])])
        vocab = build_vocab(["red box"])
        tuples = build_training_tuples(load_annotations(path), region, context, vocab)
        assert np.allclose(tuples[0].spatial, [-1, -1, 1, 1, 0, 0, 2, 2], atol=1e-12)

    def test_missing_region_key_named(self, tmp_path):
        region, context = self.stores()
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(region_key="img1:r9")])
        with pytest.raises(InputError, match="img1:r9"):
            build_training_tuples(load_annotations(path), region, context, build_vocab([]))

    def test_missing_context_key_named(self, tmp_path):
        region, context = self.stores()
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(image_id="img9", region_key="img1:r0")])
        with pytest.raises(InputError, match="img9"):
            build_training_tuples(load_annotations(path), region, context, build_vocab([]))

    def test_blank_description_rejected(self, tmp_path):
        region, context = self.stores()
        path = tmp_path / "a.jsonl"
        write_jsonl(path, [annotation_row(descriptions=["..."])])
        with pytest.raises(InputError, match="tokenizes to nothing"):
            build_training_tuples(load_annotations(path), region, context, build_vocab([]))


def small_checkpoint_parts(seed=0):
    vocab = build_vocab(["red green left right"])
    config = ScrcConfig(vocab_size=len(vocab), embed_dim=4, hidden_dim=5, feat_dim=3)
    params = ScrcParams.init(config, make_rng(seed))
    return params, config, vocab


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        params, config, vocab = small_checkpoint_parts()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, vocab, path)
        loaded, lconfig, lvocab = load_checkpoint(path)
        assert lconfig == config
        assert lvocab.tokens == vocab.tokens
        for a, b in zip(params.tensors(), loaded.tensors()):
            assert a.name == b.name
            assert np.array_equal(a.value, b.value)
            assert b.value.dtype == np.float32

    def test_double_roundtrip_same_bytes(self, tmp_path):
        params, config, vocab = small_checkpoint_parts()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(params, config, vocab, p1)
        loaded, lconfig, lvocab = load_checkpoint(p1)
        save_checkpoint(loaded, lconfig, lvocab, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_vocab_order_preserved(self, tmp_path):
        params, config, vocab = small_checkpoint_parts()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, vocab, path)
        assert load_checkpoint(path)[2].tokens == vocab.tokens

    def test_mode_flags_roundtrip(self, tmp_path):
        vocab = build_vocab(["w"])
        config = ScrcConfig(vocab_size=len(vocab), embed_dim=2, hidden_dim=2, feat_dim=2,
                            mask_spatial=True, mask_context=True)
        params = ScrcParams.init(config, make_rng(1))
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, vocab, path)
        lconfig = load_checkpoint(path)[1]
        assert lconfig.mask_spatial and lconfig.mask_context

    def test_version_mismatch(self, tmp_path):
        params, config, vocab = small_checkpoint_parts()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, vocab, path)
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", 2)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_corrupt_tensor_count(self, tmp_path):
        params, config, vocab = small_checkpoint_parts()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, vocab, path)
        data = bytearray(path.read_bytes())
        hlen = struct.unpack("<I", bytes(data[12:16]))[0]
        count_off = 16 + hlen
        data[count_off:count_off + 4] = struct.pack("<I", 9999)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_tensor_data(self, tmp_path):
        params, config, vocab = small_checkpoint_parts()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, vocab, path)
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(path.read_bytes()[:-11])
        with pytest.raises(FormatError, match=r"byte \d+"):
            load_checkpoint(cut)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 40)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)
