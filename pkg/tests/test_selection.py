import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import patch_ncc_oracle
from splatedit.errors import InputError, PipelineError, ScoreLookupError
from splatedit.imageio import read_png, write_png
from splatedit.selection import (DirectoryTranslator, ExternalScores, IdentityTranslator, ImageEntry, ImageSet,
                                 NCCSimilarity, RecolorTranslator, patch_ncc, run_iterations, select_augment)


def textured(rng, size=16):
    return rng.random((size, size, 3))


class Mapped:
    """Backend wrapper applying a monotone map to another backend's scores."""

    def __init__(self, inner, f):
        self.inner, self.f = inner, f

    def score(self, a, b):
        return self.f(self.inner.score(a, b))


def test_self_similarity_is_one(rng):
    a = ImageEntry("a", textured(rng))
    assert NCCSimilarity(8).score(a, a) == pytest.approx(1.0, abs=1e-12)


def test_negated_image_scores_zero(rng):
    img = textured(rng)
    assert NCCSimilarity(8).score(ImageEntry("a", img), ImageEntry("b", 1 - img)) == 0.0


def test_patch_scores_match_loop_oracle(rng):
    for _ in range(10):
        x, y = textured(rng, 24), textured(rng, 24)
        y = 0.5 * x + 0.5 * y
        ours = patch_ncc(x, y, 8)
        ref = patch_ncc_oracle(x, y, 8)
        assert np.abs(ours - np.array(ref)).max() < 1e-9


def test_flat_patch_rules():
    a, b = np.full((8, 8, 3), 0.4), np.full((8, 8, 3), 0.4)
    assert patch_ncc(a, b, 8).tolist() == [1.0]
    assert patch_ncc(a, b + 0.1, 8).tolist() == [0.0]
    tex = np.random.default_rng(0).random((8, 8, 3))
    assert patch_ncc(a, tex, 8).tolist() == [0.0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), patch=st.sampled_from([2, 4, 8]))
def test_similarity_symmetric_and_bounded(seed, patch):
    rng = np.random.default_rng(seed)
    a, b = ImageEntry("a", textured(rng)), ImageEntry("b", textured(rng))
    s = NCCSimilarity(patch)
    ab, ba = s.score(a, b), s.score(b, a)
    assert ab == pytest.approx(ba, abs=1e-15)
    assert 0.0 <= ab <= 1.0


def test_foreground_crop_ignores_background(rng):
    fg = np.zeros((32, 32), bool)
    fg[8:16, 8:16] = True
    x, y = textured(rng, 32), textured(rng, 32)
    y[fg] = x[fg]
    assert NCCSimilarity(8).score(ImageEntry("a", x, fg), ImageEntry("b", y, fg)) == pytest.approx(1.0)


def test_ncc_rejects_bad_input(rng):
    with pytest.raises(InputError):
        NCCSimilarity(1)
    with pytest.raises(InputError):
        NCCSimilarity(8).score(ImageEntry("a", textured(rng, 16)), ImageEntry("b", textured(rng, 24)))
    with pytest.raises(InputError):
        patch_ncc(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), 8)


def test_image_set_rules(rng):
    with pytest.raises(InputError):
        ImageSet([ImageEntry("a", textured(rng)), ImageEntry("a", textured(rng))])
    with pytest.raises(InputError):
        ImageEntry("a", np.full((2, 2, 3), np.nan))
    s = ImageSet([ImageEntry("a", textured(rng)), ImageEntry("b", textured(rng))])
    assert s.without(["a"]).ids == ["b"] and "b" in s and s["a"].id == "a"


def test_single_candidate_is_chosen(rng):
    train = ImageSet([ImageEntry("ref", textured(rng))])
    chosen, table = select_augment(train, ImageSet([ImageEntry("c", textured(rng))]), NCCSimilarity(8))
    assert chosen == "c" and set(table["c"]["scores"]) == {"ref"}


def test_novel_beats_duplicate(rng):
    ref = textured(rng)
    train = ImageSet([ImageEntry("ref", ref)])
    cands = ImageSet([ImageEntry("dup", ref + rng.normal(0, 0.01, ref.shape)), ImageEntry("new", textured(rng))])
    assert select_augment(train, cands, NCCSimilarity(8))[0] == "new"


def test_ties_keep_first_candidate():
    scores = ExternalScores({("a", "t"): 0.5, ("b", "t"): 0.5})
    img = np.zeros((4, 4, 3))
    chosen, _ = select_augment(ImageSet([ImageEntry("t", img)]),
                               ImageSet([ImageEntry("b", img), ImageEntry("a", img)]), scores)
    assert chosen == "b"


def test_select_augment_needs_inputs(rng):
    with pytest.raises(InputError):
        select_augment(ImageSet(), ImageSet([ImageEntry("c", textured(rng))]), NCCSimilarity(8))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 10.0), shift=st.floats(-5.0, 5.0))
def test_choice_invariant_under_positive_affine_rescaling(seed, scale, shift):
    rng = np.random.default_rng(seed)
    train = ImageSet([ImageEntry(f"t{i}", textured(rng)) for i in range(3)])
    cands = ImageSet([ImageEntry(f"c{i}", textured(rng)) for i in range(4)])
    base = NCCSimilarity(4)
    assert select_augment(train, cands, base)[0] == select_augment(train, cands, Mapped(base, lambda s: scale * s + shift))[0]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_choice_invariant_under_monotone_map_with_single_reference(seed):
    rng = np.random.default_rng(seed)
    train = ImageSet([ImageEntry("ref", textured(rng))])
    cands = ImageSet([ImageEntry(f"c{i}", textured(rng)) for i in range(4)])
    base = NCCSimilarity(4)
    assert select_augment(train, cands, base)[0] == select_augment(train, cands, Mapped(base, np.expm1))[0]


def test_external_scores_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("id_a,id_b,score\n# comment\na,b,0.25\n")
    s = ExternalScores.from_csv(p)
    img = np.zeros((2, 2, 3))
    assert s.score(ImageEntry("b", img), ImageEntry("a", img)) == 0.25
    with pytest.raises(ScoreLookupError):
        s.score(ImageEntry("a", img), ImageEntry("c", img))
    p.write_text("a,b\n")
    with pytest.raises(InputError):
        ExternalScores.from_csv(p)


def renders(rng, n=3):
    fg = np.zeros((8, 8), bool)
    fg[2:6, 2:6] = True
    return ImageSet([ImageEntry(f"v{i}", textured(rng, 8), fg) for i in range(n)])


def test_single_round_adds_one(rng):
    rs = renders(rng)
    ref = ImageEntry("ref", textured(rng, 8))
    out = run_iterations(ref, rs, IdentityTranslator(), 1, NCCSimilarity(4))
    assert len(out) == 2 and out.ids[0] == "ref" and out.ids[1] in rs.ids


def test_two_rounds_follow_scripted_scores(rng):
    rs = renders(rng)
    table = {("v0", "ref"): 0.9, ("v1", "ref"): 0.1, ("v2", "ref"): 0.5,
             ("v0", "v1"): 0.0, ("v2", "v1"): 0.6}
    log = []
    out = run_iterations(ImageEntry("ref", textured(rng, 8)), rs, IdentityTranslator(), 2,
                         ExternalScores(table), log)
    assert out.ids == ["ref", "v1", "v0"]
    assert log[1]["pool"] == ["v0", "v2"]
    assert log[1]["table"]["v0"]["total"] == pytest.approx(0.9)


def test_selected_views_never_repeat(rng):
    rs = renders(rng, 4)
    out = run_iterations(ImageEntry("ref", textured(rng, 8)), rs, RecolorTranslator((1, 0, 0), 0.5), 4,
                         NCCSimilarity(4))
    assert sorted(out.ids[1:]) == rs.ids
    with pytest.raises(PipelineError):
        run_iterations(ImageEntry("ref", textured(rng, 8)), rs, IdentityTranslator(), 5, NCCSimilarity(4))
    with pytest.raises(InputError):
        run_iterations(ImageEntry("ref", textured(rng, 8)), rs, IdentityTranslator(), 0, NCCSimilarity(4))


def test_recolor_touches_only_foreground(rng):
    rs = renders(rng, 1)
    out = RecolorTranslator((0.2, 0.4, 0.6), 1.0).translate(1, ImageSet(), rs)["v0"]
    fg = rs["v0"].fg_mask
    assert np.all(out.image[fg] == [0.2, 0.4, 0.6])
    assert np.array_equal(out.image[~fg], rs["v0"].image[~fg])


def test_translator_errors_carry_round(rng):
    class Broken:
        def translate(self, iteration, train, renders):
            if iteration == 2:
                raise RuntimeError("boom")
            return IdentityTranslator().translate(iteration, train, renders)

    with pytest.raises(PipelineError) as err:
        run_iterations(ImageEntry("ref", textured(rng, 8)), renders(rng), Broken(), 2, NCCSimilarity(4))
    assert err.value.iteration == 2


def test_directory_protocol(tmp_path, rng):
    rs = renders(rng, 2)
    tr = DirectoryTranslator(tmp_path, prompt="make it red", timeout=10, poll_interval=0.01)

    def worker():
        d = tmp_path / "iter_1"
        while not (d / "request.json").exists():
            time.sleep(0.01)
        (d / "translated").mkdir()
        for p in sorted((d / "renders").glob("*.png")):
            write_png(d / "translated" / p.name, 1 - read_png(p))
        (d / "done").touch()

    th = threading.Thread(target=worker)
    th.start()
    out = tr.translate(1, ImageSet([ImageEntry("ref", textured(rng, 8))]), rs)
    th.join()
    assert out.ids == rs.ids
    assert (tmp_path / "iter_1" / "train" / "ref.png").exists()
    assert np.abs(out["v0"].image - (1 - rs["v0"].image)).max() <= 1 / 255 + 1e-12


def test_directory_timeout_reports_round(tmp_path, rng):
    tr = DirectoryTranslator(tmp_path, timeout=0.05, poll_interval=0.01)
    with pytest.raises(PipelineError) as err:
        run_iterations(ImageEntry("ref", textured(rng, 8)), renders(rng), tr, 1, NCCSimilarity(4))
    assert err.value.iteration == 1 and "timed out" in str(err.value)


def test_directory_missing_output(tmp_path, rng):
    tr = DirectoryTranslator(tmp_path, timeout=1, poll_interval=0.01)
    (tmp_path / "iter_3").mkdir()
    (tmp_path / "iter_3" / "done").touch()
    with pytest.raises(PipelineError):
        tr.translate(3, ImageSet(), renders(rng))
