import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jetflow.data import (BOI, BOT, BOUNDARY, CLASS, EOS, NOLABEL, PAD, SOFT, TEXT, DatasetFile, DatasetFormatError,
                          OverlongCaptionError, SequenceLayout, SynthShapesSpec, detokenize, flip_left_right,
                          pack_example, synth_shapes, tokenize)


@given(st.binary(max_size=40))
def test_tokenize_round_trip(b):
    assert detokenize(tokenize(b)) == b
    assert detokenize(tokenize(b) + [EOS, 65]) == b


def test_detokenize_drops_markers_and_rejects_junk():
    assert detokenize([BOI, 104, BOT, 105]) == b"hi"
    with pytest.raises(ValueError):
        detokenize([400])


@pytest.mark.parametrize("kind", ["none", "class", "caption"])
def test_dataset_round_trip(kind, tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 4, 6, 3)).astype(np.uint8)
    labels = {"none": None, "class": [0, 1, 2, 1, 0], "caption": [b"", b"a", b"bb", b"red", b"\xff"]}[kind]
    ds = DatasetFile(imgs, kind, labels, 3 if kind != "none" else 0)
    ds.write(tmp_path / "d.jfds")
    back = DatasetFile.read(tmp_path / "d.jfds")
    assert back.label_kind == kind and back.num_classes == ds.num_classes
    assert np.array_equal(back.images, imgs)
    if kind == "class":
        assert back.labels.tolist() == labels
    elif kind == "caption":
        assert back.labels == labels


def test_dataset_format_errors():
    buf = synth_shapes(SynthShapesSpec(count=3, size=4)).to_bytes()
    with pytest.raises(DatasetFormatError):
        DatasetFile.from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(DatasetFormatError):
        DatasetFile.from_bytes(buf[:-1])
    with pytest.raises(DatasetFormatError):
        DatasetFile.from_bytes(buf[:5])


def test_synth_shapes_is_deterministic_and_labelled():
    a = synth_shapes(SynthShapesSpec(count=50, seed=1))
    b = synth_shapes(SynthShapesSpec(count=50, seed=1))
    assert np.array_equal(a.images, b.images) and a.images.shape == (50, 16, 16, 3)
    assert a.num_classes == 9 and set(a.labels) <= set(range(9))
    caps = synth_shapes(SynthShapesSpec(count=9, seed=1, captions=True))
    assert all(c.startswith(b"a ") and len(c) <= 16 for c in caps.labels)


def _layout(kind="class", **kw):
    return SequenceLayout(num_image_tokens=4, label_kind=kind, max_text_len=6, prefix_len=3,
                          cond_drop=kw.pop("cond_drop", 0.0), num_classes=5, **kw)


def test_class_layout():
    s = pack_example(2, "random", _layout(), np.random.default_rng(0))
    assert s.kind.tolist() == [CLASS] * 3 + [SOFT] * 4
    assert s.slot[:3].tolist() == [0, 1, 2] and s.token_id[:3].tolist() == [2, 2, 2]
    assert s.loss_mask.tolist() == [False] * 3 + [True] * 4
    assert s.position_ids.tolist() == list(range(7)) and s.image_start == 3


def test_caption_layouts_and_second_modality_rule():
    lay = _layout("caption")
    t2i = pack_example(b"ab", "text_then_image", lay, np.random.default_rng(0))
    assert t2i.kind.tolist()[:7] == [TEXT, TEXT, PAD, PAD, PAD, PAD, BOUNDARY]
    assert t2i.token_id[6] == BOI and t2i.image_start == 7
    assert t2i.loss_mask.tolist() == (t2i.kind == SOFT).tolist()
    i2t = pack_example(b"ab", "image_then_text", lay, np.random.default_rng(0))
    assert i2t.image_start == 0 and i2t.token_id[4] == BOT
    assert i2t.token_id[i2t.loss_mask].tolist() == [97, 98, EOS]
    assert len(t2i) == len(i2t) == lay.length
    # padding never gets a position and positions of real tokens are contiguous
    real = t2i.kind != PAD
    assert (t2i.position_ids[~real] == -1).all()
    assert t2i.position_ids[real].tolist() == list(range(real.sum()))


@settings(max_examples=40, deadline=None)
@given(st.binary(max_size=6), st.sampled_from(["text_then_image", "image_then_text"]), st.integers(0, 99))
def test_loss_only_on_second_modality(text, direction, seed):
    s = pack_example(text, direction, _layout("caption", cond_drop=0.5), np.random.default_rng(seed))
    if direction == "text_then_image":
        assert (s.kind[s.loss_mask] == SOFT).all() and s.loss_mask.sum() == 4
    else:
        assert (s.kind[s.loss_mask] == TEXT).all() and s.loss_mask.sum() == len(text) + 1


def test_dropped_conditioning_uses_nolabel():
    s = pack_example(b"hi", "text_then_image", _layout("caption", cond_drop=1.0), np.random.default_rng(0))
    assert s.dropped and (s.kind[:6] == NOLABEL).all()
    s = pack_example(1, "text_then_image", _layout(cond_drop=1.0), np.random.default_rng(0))
    assert (s.kind[:3] == NOLABEL).all()


def test_conditioning_dropout_rate():
    rng = np.random.default_rng(0)
    lay = _layout(cond_drop=0.1)
    rate = np.mean([pack_example(1, "random", lay, rng).dropped for _ in range(20_000)])
    assert abs(rate - 0.1) < 0.01


def test_packing_errors():
    with pytest.raises(OverlongCaptionError):
        pack_example(b"x" * 7, "text_then_image", _layout("caption"), np.random.default_rng(0))
    with pytest.raises(ValueError):
        pack_example(9, "random", _layout(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        pack_example(b"", "sideways", _layout("caption"), np.random.default_rng(0))


def test_flip():
    img = np.arange(12, dtype=np.uint8).reshape(1, 4, 3)
    flips = {flip_left_right(img, np.random.default_rng(s))[0, 0, 0] for s in range(20)}
    assert flips == {0, 9}
