import numpy as np
import pytest

from editforge import clients as cl
from editforge import filters as ft
from editforge import images as im
from editforge.errors import ContractError, ProviderError, ShapeError
from editforge.instructions import EditRecord


def vec(values, provider="p"):
    return ft.EmbeddingVector(np.asarray(values, dtype=float), provider)


def cosine_oracle(a, b):
    num = sum(x * y for x, y in zip(a, b))
    na = sum(x * x for x in a) ** 0.5
    nb = sum(y * y for y in b) ** 0.5
    return num / (na * nb)


def make_record(**kw):
    base = dict(edit="turn the car blue", edited_object="car",
                input="a car on a road", output="a blue car on a road",
                edit_type="color alter")
    base.update(kw)
    return EditRecord(**base)


class TestCosine:
    def test_identical_vectors(self):
        v = vec([1.0, 2.0, -3.0])
        assert ft.cosine(v, v).value == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert ft.cosine(vec([1, 0]), vec([0, 1])).value == 0.0

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=8), rng.normal(size=8)
        got = ft.cosine(vec(a), vec(b))
        assert abs(got.value - cosine_oracle(a, b)) < 1e-12
        assert not got.degenerate

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            ft.cosine(vec([1, 2]), vec([1, 2, 3]))

    def test_degenerate_norm(self):
        out = ft.cosine(vec([0.0, 0.0]), vec([1.0, 0.0]))
        assert out == ft.Similarity(0.0, True)

    def test_range_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a, b = rng.normal(size=5), rng.normal(size=5)
            s = ft.cosine(vec(a), vec(b)).value
            assert -1.0 <= s <= 1.0 + 1e-15


class TestClipMetrics:
    def test_stub_rendered_caption_identity(self):
        e = cl.StubEmbedder("joint")
        caption = "a camel standing on a snowfield"
        png = e.render_caption(caption)
        out = ft.clip_text_alignment(e.embed_image(png), e.embed_text(caption))
        assert out.value == pytest.approx(1.0, abs=1e-12)

    def test_provider_mismatch(self):
        with pytest.raises(ContractError):
            ft.clip_text_alignment(vec([1, 0], "a"), vec([1, 0], "b"))
        with pytest.raises(ContractError):
            ft.clip_image_similarity(vec([1, 0], "a"), vec([1, 0], "b"))

    def test_identical_images_similarity_one(self):
        e = cl.StubEmbedder("joint")
        png = im.encode_png(np.random.default_rng(2).uniform(size=(16, 16, 3)))
        out = ft.clip_image_similarity(e.embed_image(png), e.embed_image(png))
        assert out.value == pytest.approx(1.0, abs=1e-12)

    def test_unrelated_stub_images_below_half(self):
        e = cl.StubEmbedder("joint")
        rng = np.random.default_rng(3)
        a = im.encode_png(rng.uniform(size=(16, 16, 3)))
        b = im.encode_png(rng.uniform(size=(16, 16, 3)))
        out = ft.clip_image_similarity(e.embed_image(a), e.embed_image(b))
        assert out.value < 0.5


class TestL1:
    def test_identical(self):
        a = np.random.default_rng(4).uniform(size=(8, 8, 3))
        assert ft.l1_distance(a, a.copy()) == 0.0

    def test_black_vs_white(self):
        assert ft.l1_distance(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 1.0

    def test_half_changed_vs_loop_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(4, 4, 3))
        b = a.copy()
        b[:2] = rng.uniform(size=(2, 4, 3))
        got = ft.l1_distance(a, b)
        total = 0.0
        for y in range(4):
            for x in range(4):
                for c in range(3):
                    total += abs(a[y, x, c] - b[y, x, c])
        assert abs(got - total / 48) < 1e-12

    def test_geometry_mismatch(self):
        with pytest.raises(ShapeError):
            ft.l1_distance(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestDirectional:
    def test_parallel_deltas(self):
        e_io, e_ie = vec([1, 0, 0]), vec([1, 1, 0])
        e_to, e_te = vec([0, 2, 0]), vec([0, 3, 0])
        out = ft.directional_similarity(e_io, e_ie, e_to, e_te)
        assert out.value == pytest.approx(1.0, abs=1e-12)

    def test_identity_edit_degenerate(self):
        a = vec([1.0, 2.0])
        out = ft.directional_similarity(a, vec([1.0, 2.0]), vec([3, 1]),
                                        vec([3, 1]))
        assert out == ft.Similarity(0.0, True)

    def test_fixture_quadruple_vs_hand_cosine(self):
        rng = np.random.default_rng(6)
        io, ie = rng.normal(size=5), rng.normal(size=5)
        to, te = rng.normal(size=5), rng.normal(size=5)
        got = ft.directional_similarity(vec(io), vec(ie), vec(to), vec(te))
        want = cosine_oracle(ie - io, te - to)
        assert abs(got.value - want) < 1e-12


class TestPreFilter:
    def test_extreme_aspect_ratio(self):
        ok, reasons = ft.pre_filter(make_record(),
                                    {"width": 32, "height": 1024})
        assert not ok
        assert any("aspect-ratio" in r for r in reasons)

    def test_valid_record_passes(self):
        ok, reasons = ft.pre_filter(
            make_record(), {"width": 512, "height": 512, "aesthetic": 6.0})
        assert ok and reasons == []

    def test_inanimate_action_change(self):
        rec = make_record(edit="animate the desk to dance",
                          edited_object="desk", input="a desk in a room",
                          output="a desk in a room, dancing",
                          edit_type="action change")
        ok, reasons = ft.pre_filter(rec, {"width": 512, "height": 512})
        assert not ok
        assert any("inanimate-action-target" in r for r in reasons)

    def test_low_resolution(self):
        ok, reasons = ft.pre_filter(make_record(), {"width": 64, "height": 64})
        assert not ok
        assert any("resolution" in r for r in reasons)

    def test_low_aesthetic(self):
        ok, reasons = ft.pre_filter(
            make_record(), {"width": 512, "height": 512, "aesthetic": 1.5})
        assert not ok
        assert any("aesthetic" in r for r in reasons)


def fixture_pair(caption_in="a gray car parked on a road",
                 caption_out="a blue car parked on a road",
                 edited_object="car"):
    rng = np.random.default_rng(7)
    base = rng.uniform(0.3, 0.7, size=(24, 24, 3))
    edited = base.copy()
    edited[8:16, 8:16] = [0.2, 0.2, 0.9]
    png_o = im.encode_png(base, {"stub-caption": caption_in,
                                 "stub-objects": edited_object})
    png_e = im.encode_png(edited, {"stub-caption": caption_out,
                                   "stub-objects": edited_object})
    return base, edited, png_o, png_e


class TestGauntlet:
    def providers(self):
        return cl.providers_from_env(stub_only=True)

    def test_noop_edit_fails_directional(self):
        base, _, png_o, _ = fixture_pair()
        record = make_record(input="a gray car parked on a road",
                             output="a gray car parked on a road.",
                             edit="turn the car blue")
        report = ft.run_gauntlet(record, base, base.copy(), png_o, png_o,
                                 self.providers())
        assert report.verdict == "fail"
        assert report.flags["directional_degenerate"]
        assert not report.gates["directional"]
        assert "gate:directional" in report.reasons

    def test_passing_fixture_pair(self):
        base, edited, png_o, png_e = fixture_pair()
        record = make_record(input="a gray car parked on a road",
                             output="a blue car parked on a road")
        report = ft.run_gauntlet(record, base, edited, png_o, png_e,
                                 self.providers())
        assert report.verdict == "pass"
        assert set(report.metrics) == {"clip_im", "clip_out", "l1", "dino",
                                       "directional"}

    def test_detector_absence_fails_add(self):
        base, edited, png_o, _ = fixture_pair()
        # edited image metadata omits the added object entirely
        png_e = im.encode_png(edited, {"stub-caption": "a car on a road"})
        record = make_record(edit="add a hat to the scene",
                             edited_object="hat",
                             input="a gray car parked on a road",
                             output="a gray car parked on a road with a hat",
                             edit_type="add")
        report = ft.run_gauntlet(record, base, edited, png_o, png_e,
                                 self.providers())
        assert report.gates["detector"] is False
        assert report.verdict == "fail"
        assert "gate:detector" in report.reasons

    def test_provider_failure_incomplete(self):
        class DownEmbedder:
            def embed_image(self, png):
                raise ProviderError("connection refused")

            def embed_text(self, text):
                raise ProviderError("connection refused")

        providers = self.providers()
        providers.embed = DownEmbedder()
        base, edited, png_o, png_e = fixture_pair()
        report = ft.run_gauntlet(make_record(), base, edited, png_o, png_e,
                                 providers)
        assert report.verdict == "incomplete"
        assert report.gates == {}

    def test_deterministic_report(self):
        base, edited, png_o, png_e = fixture_pair()
        record = make_record(input="a gray car parked on a road",
                             output="a blue car parked on a road")
        r1 = ft.run_gauntlet(record, base, edited, png_o, png_e, self.providers())
        r2 = ft.run_gauntlet(record, base, edited, png_o, png_e, self.providers())
        assert r1.to_dict() == r2.to_dict()

    def test_threshold_relaxation_monotonic(self):
        base, edited, png_o, png_e = fixture_pair()
        record = make_record(input="a gray car parked on a road",
                             output="a blue car parked on a road")
        strict = ft.FilterThresholds(min_clip_im=0.99, max_l1=0.0001)
        relaxed = ft.FilterThresholds(min_clip_im=0.5, max_l1=0.5)
        r_strict = ft.run_gauntlet(record, base, edited, png_o, png_e,
                                   self.providers(), strict)
        r_relaxed = ft.run_gauntlet(record, base, edited, png_o, png_e,
                                    self.providers(), relaxed)
        if r_strict.verdict == "pass":
            assert r_relaxed.verdict == "pass"
        for gate, ok in r_strict.gates.items():
            if ok:
                assert r_relaxed.gates[gate]


class TestThresholds:
    def test_similarity_bounds_enforced(self):
        with pytest.raises(ContractError):
            ft.FilterThresholds(min_clip_im=1.5)
        with pytest.raises(ContractError):
            ft.FilterThresholds(min_directional=-2.0)

    def test_l1_bound_enforced(self):
        with pytest.raises(ContractError):
            ft.FilterThresholds(max_l1=1.5)

    def test_defaults_valid(self):
        t = ft.FilterThresholds()
        assert t.min_clip_im == 0.70 and t.max_l1 == 0.30


class TestSummaries:
    def test_summarize_counts(self):
        reports = [ft.FilterReport(verdict="pass"),
                   ft.FilterReport(verdict="fail", reasons=["gate:l1"]),
                   ft.FilterReport(verdict="fail",
                                   reasons=["gate:l1", "gate:dino"])]
        s = ft.summarize(reports)
        assert s["total"] == 3 and s["pass"] == 1 and s["fail"] == 2
        assert s["reasons"] == {"gate:dino": 1, "gate:l1": 2}

    def test_merge_associative_commutative(self):
        a = {"total": 1, "pass": 1, "fail": 0, "incomplete": 0,
             "reasons": {"x": 1}}
        b = {"total": 2, "pass": 0, "fail": 2, "incomplete": 0,
             "reasons": {"x": 1, "y": 1}}
        c = {"total": 1, "pass": 0, "fail": 0, "incomplete": 1, "reasons": {}}
        ab_c = ft.merge_summaries(ft.merge_summaries(a, b), c)
        a_bc = ft.merge_summaries(a, ft.merge_summaries(b, c))
        assert ab_c == a_bc
        assert ft.merge_summaries(a, b) == ft.merge_summaries(b, a)
