import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lmmiqa.dataset import (
    Dataset,
    DecodeFailure,
    DuplicateId,
    ImageBuffer,
    ImageError,
    ImageRecord,
    ManifestError,
    MissingColumn,
    ScoreOutOfRange,
    UnsupportedChannelCount,
    decode_image,
    encode_png8,
    encode_png16,
    load_image,
    load_manifest,
    write_manifest,
)

HEADER = "id,path,split,score,region,noise\n"


def _write(tmp_path, body, header=HEADER):
    p = tmp_path / "manifest.csv"
    p.write_text(header + body, encoding="utf-8")
    return p


def _png(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def test_empty_manifest(tmp_path):
    ds = load_manifest(_write(tmp_path, ""))
    assert ds.records == ()
    assert ds.counts() == (0, 0)


def test_split_counts_at_full_dataset_scale(tmp_path):
    rows = [f"tr{i},a.png,train,{i % 5},," for i in range(1000)]
    rows += [f"te{i},b.png,test,,," for i in range(300)]
    ds = load_manifest(_write(tmp_path, "\n".join(rows) + "\n"))
    assert ds.counts() == (1000, 300)
    assert [r.id for r in ds.records[:2]] == ["tr0", "tr1"]
    assert ds.root == tmp_path


def test_score_out_of_range_names_row(tmp_path):
    p = _write(tmp_path, "a,x.png,train,3.0,,\nb,y.png,train,4.2,,\n")
    with pytest.raises(ScoreOutOfRange, match=r"row 2 \(id=b\)"):
        load_manifest(p)


def test_duplicate_id(tmp_path):
    with pytest.raises(DuplicateId, match="row 2"):
        load_manifest(_write(tmp_path, "a,x.png,train,1,,\na,y.png,test,,,\n"))


def test_missing_column(tmp_path):
    with pytest.raises(MissingColumn, match="noise"):
        load_manifest(_write(tmp_path, "", header="id,path,split,score,region\n"))
    with pytest.raises(MissingColumn):
        load_manifest(_write(tmp_path, "a,x.png,train\n"))


def test_header_order_is_fixed(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(_write(tmp_path, "", header="path,id,split,score,region,noise\n"))


def test_other_row_errors(tmp_path):
    with pytest.raises(ManifestError, match="split"):
        load_manifest(_write(tmp_path, "a,x.png,val,1,,\n"))
    with pytest.raises(ManifestError, match="need a score"):
        load_manifest(_write(tmp_path, "a,x.png,train,,,\n"))
    with pytest.raises(ManifestError, match="noise"):
        load_manifest(_write(tmp_path, "a,x.png,test,,,-0.1\n"))


def test_blind_test_rows_allowed(tmp_path):
    ds = load_manifest(_write(tmp_path, "a,x.png,test,,liver,0.004\n"))
    assert ds.records[0].score is None
    assert ds.records[0].has_metadata


def test_roundtrip_and_determinism(tmp_path):
    ds = Dataset(
        (
            ImageRecord("a", "img/a.png", "train", 2.6, "liver", 0.0031),
            ImageRecord("b,quoted", "img/b.png", "test", None, None, None),
            ImageRecord("c", "img/c.png", "test", 0.1 + 0.2, "chest", 0.0),
        ),
        tmp_path,
    )
    write_manifest(ds, tmp_path / "m.csv")
    again = load_manifest(tmp_path / "m.csv")
    assert again == ds
    assert load_manifest(tmp_path / "m.csv") == again


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["train", "test"]), st.floats(0, 4), st.floats(0, 1)), max_size=12))
def test_roundtrip_property(tmp_path_factory, rows):
    root = tmp_path_factory.mktemp("rt")
    ds = Dataset(tuple(ImageRecord(f"r{i}", f"{i}.png", s, sc, "abdomen", n) for i, (s, sc, n) in enumerate(rows)), root)
    write_manifest(ds, root / "m.csv")
    assert load_manifest(root / "m.csv") == ds


def test_decode_16bit_max_is_one():
    buf = decode_image(_png(np.full((4, 5), 65535, dtype=np.uint16)))
    assert (buf.height, buf.width) == (4, 5)
    assert np.all(buf.pixels == 1.0)


def test_decode_8bit_min_and_value_51():
    assert np.all(decode_image(_png(np.zeros((3, 3), dtype=np.uint8))).pixels == 0.0)
    buf = decode_image(_png(np.full((2, 2), 51, dtype=np.uint8)))
    assert buf.pixels[0, 0] == 51 / 255 == 0.2


def test_rgb_rejected():
    with pytest.raises(UnsupportedChannelCount):
        decode_image(_png(np.zeros((4, 4, 3), dtype=np.uint8)))


def test_garbage_rejected():
    with pytest.raises(DecodeFailure):
        decode_image(b"not an image", "junk.png")


def test_load_image_missing_file(tmp_path):
    with pytest.raises(DecodeFailure, match="nope.png"):
        load_image(ImageRecord("a", "nope.png", "test"), tmp_path)


def test_load_image_keeps_file_bytes(tmp_path):
    data = encode_png16(np.linspace(0, 1, 64).reshape(8, 8))
    (tmp_path / "a.png").write_bytes(data)
    buf = load_image(ImageRecord("a", "a.png", "train", 1.0), tmp_path)
    assert buf.png_bytes() == data
    assert buf.media_type == "image/png"
    assert buf.pixels.min() >= 0 and buf.pixels.max() <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1), st.booleans())
def test_normalization_property(h, w, seed, sixteen):
    rng = np.random.default_rng(seed)
    px = rng.random((h, w))
    buf = decode_image(encode_png16(px) if sixteen else encode_png8(px))
    assert buf.pixels.shape == (h, w)
    assert buf.pixels.min() >= 0.0 and buf.pixels.max() <= 1.0
    step = 1 / 65535 if sixteen else 1 / 255
    assert np.max(np.abs(buf.pixels - px)) <= step / 2 + 1e-12


def test_image_buffer_validation():
    with pytest.raises(ImageError):
        ImageBuffer(np.array([[1.5]]))
    with pytest.raises(ImageError):
        ImageBuffer(np.zeros((0, 3)))
    buf = ImageBuffer(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        buf.pixels[0, 0] = 1.0


def test_record_validation():
    with pytest.raises(ScoreOutOfRange):
        ImageRecord("a", "p", "train", -0.1)
    with pytest.raises(ManifestError):
        ImageRecord("a", "p", "dev")
