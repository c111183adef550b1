import numpy as np
import pytest

from axvit.multipliers import (
    AxMultiplier,
    Catalog,
    approx_product,
    approx_products,
    build_lut,
    builtin_catalog,
    error_metrics,
    load_catalog,
    load_lut,
    lut_checksum,
    lut_lookup,
    parse_multiplier_spec,
    save_catalog,
    save_lut,
)
from oracles import brute_force_error_metrics, perforated_product, truncated_product


def mult(kind, b=8, **kw):
    return AxMultiplier(f"test_{kind}", b, kind, **kw)


class TestApproxProduct:
    def test_exact_examples(self):
        m = mult("exact")
        assert approx_product(m, 7, -3) == -21
        assert approx_product(m, 127, 127) == 16129
        assert approx_product(m, 0, -55) == 0

    def test_truncate_example(self):
        assert approx_product(mult("truncate_lsb", k=2), 7, -3) == -16

    def test_perforate_r0_is_exact(self):
        assert approx_product(mult("perforate_pp", r=0), -128, -128) == 16384

    def test_matches_bit_level_oracle_sampled(self):
        rng = np.random.default_rng(11)
        xs = rng.integers(-128, 128, size=300)
        ys = rng.integers(-128, 128, size=300)
        tm = mult("truncate_lsb", k=3)
        pm = mult("perforate_pp", r=2)
        for x, y in zip(xs.tolist(), ys.tolist()):
            assert approx_product(tm, x, y) == truncated_product(x, y, 8, 3)
            assert approx_product(pm, x, y) == perforated_product(x, y, 8, 2)

    def test_out_of_range_names_operand(self):
        with pytest.raises(ValueError, match="operand x"):
            approx_product(mult("exact"), 128, 0)
        with pytest.raises(ValueError, match="operand y"):
            approx_product(mult("exact"), 0, -129)

    def test_array_version_matches_scalar(self):
        m = mult("perforate_pp", r=1)
        xs = np.arange(-128, 128)
        got = approx_products(m, xs[:, None], xs[None, ::8])
        for i, x in enumerate(xs.tolist()):
            for j, y in enumerate(xs[::8].tolist()):
                assert got[i, j] == approx_product(m, x, y)


class TestBuildLut:
    def test_exact_2bit_corner(self):
        lut = build_lut(mult("exact", b=2))
        assert lut.entries[lut.encode(-2), lut.encode(-2)] == 4

    def test_exact_8bit_is_product_table(self):
        lut = build_lut(mult("exact"))
        ops = np.arange(-128, 128)
        assert np.array_equal(lut.entries, ops[:, None] * ops[None, :])

    def test_truncate_matches_functional_exhaustively(self):
        m = mult("truncate_lsb", k=2)
        lut = build_lut(m)
        ops = np.arange(-128, 128)
        assert np.array_equal(lut.entries,
                              approx_products(m, ops[:, None], ops[None, :]))

    def test_refuses_large_bitwidth(self):
        with pytest.raises(ValueError, match="functional"):
            build_lut(mult("exact", b=13))

    def test_entries_immutable(self):
        lut = build_lut(mult("exact", b=4))
        with pytest.raises(ValueError):
            lut.entries[0, 0] = 1


class TestLutLookup:
    def test_examples(self):
        exact = build_lut(mult("exact"))
        assert lut_lookup(exact, 127, 127) == 16129
        assert lut_lookup(exact, 0, -55) == 0
        k3 = build_lut(mult("truncate_lsb", k=3))
        assert lut_lookup(k3, 5, 9) == 0

    def test_out_of_range(self):
        lut = build_lut(mult("exact", b=4))
        with pytest.raises(ValueError, match="out of range"):
            lut_lookup(lut, 8, 0)


class TestErrorMetrics:
    def test_exact_is_zero(self):
        em = error_metrics(mult("exact"))
        assert (em.mae_pct, em.wce_pct, em.mre_pct) == (0.0, 0.0, 0.0)

    def test_truncate_k1_matches_brute_force(self):
        em = error_metrics(mult("truncate_lsb", k=1))
        mae, wce, mre = brute_force_error_metrics(
            lambda x, y: truncated_product(x, y, 8, 1), 8)
        assert em.mae_pct == pytest.approx(mae, abs=0)
        assert em.wce_pct == pytest.approx(wce, abs=0)
        assert em.mre_pct == pytest.approx(mre, rel=1e-12)

    def test_mae_monotone_in_k(self):
        maes = [error_metrics(mult("truncate_lsb", k=k)).mae_pct for k in range(5)]
        assert all(a <= b for a, b in zip(maes, maes[1:]))

    def test_mae_le_wce_for_catalog(self):
        for m in builtin_catalog():
            em = error_metrics(m)
            assert 0.0 <= em.mae_pct <= em.wce_pct

    def test_k0_and_r0_equal_exact_exhaustively(self):
        exact = build_lut(mult("exact")).entries
        assert np.array_equal(build_lut(mult("truncate_lsb", k=0)).entries, exact)
        assert np.array_equal(build_lut(mult("perforate_pp", r=0)).entries, exact)


class TestLutFile:
    def test_roundtrip(self, tmp_path):
        lut = build_lut(mult("truncate_lsb", k=2))
        path = str(tmp_path / "t.axlut")
        save_lut(lut, path)
        assert load_lut(path) == lut
        assert lut_checksum(path) == lut_checksum(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.axlut"
        path.write_bytes(b"NOTALUT" * 4)
        with pytest.raises(ValueError, match="magic"):
            load_lut(str(path))

    def test_truncated_payload(self, tmp_path):
        lut = build_lut(mult("exact", b=4))
        path = tmp_path / "t.axlut"
        save_lut(lut, str(path))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_lut(str(path))

    def test_external_multiplier_uses_file(self, tmp_path):
        path = str(tmp_path / "ext.axlut")
        save_lut(build_lut(mult("truncate_lsb", k=1)), path)
        ext = AxMultiplier("ext", 8, "external", lut_path=path)
        assert approx_product(ext, 7, -3) == truncated_product(7, -3, 8, 1)


class TestCatalog:
    def test_builtin_presets(self):
        cat = builtin_catalog()
        assert cat.names() == ["mul8s_1KV6", "mul8s_1KV9", "mul8s_1L2H", "mul8s_1L2L"]
        base = cat.get("mul8s_1KV6")
        assert base.kind == "exact"
        assert (base.power_mw, base.area_um2, base.delay_ns) == (0.425, 729.8, 1.48)
        assert [cat.get(n).power_mw for n in cat.names()] == [0.425, 0.410, 0.301, 0.200]
        assert [getattr(cat.get(n), "k") for n in cat.names()[1:]] == [1, 2, 3]

    def test_roundtrip(self, tmp_path):
        cat = builtin_catalog()
        path = str(tmp_path / "cat.json")
        save_catalog(cat, path)
        loaded = load_catalog(path)
        assert loaded.names() == cat.names()
        for n in cat.names():
            assert loaded.get(n) == cat.get(n)

    def test_parse_error_has_line_number(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('[\n{"name": "x",}\n]\n')
        with pytest.raises(ValueError, match=r":2:"):
            load_catalog(str(path))

    def test_duplicate_name_rejected(self):
        cat = Catalog([mult("exact")])
        with pytest.raises(ValueError):
            cat.add(mult("exact"))

    def test_lut_cache_returns_same_object(self, catalog):
        assert catalog.lut("mul8s_1L2H") is catalog.lut("mul8s_1L2H")


class TestSpecParsing:
    @pytest.mark.parametrize("text,kind,param", [
        ("exact8", "exact", None),
        ("trunc8k2", "truncate_lsb", 2),
        ("perf8r1", "perforate_pp", 1),
    ])
    def test_valid(self, text, kind, param):
        m = parse_multiplier_spec(text)
        assert m.kind == kind and m.bitwidth == 8
        if kind == "truncate_lsb":
            assert m.k == param
        if kind == "perforate_pp":
            assert m.r == param

    @pytest.mark.parametrize("text", ["", "trunc8", "trunc8r2", "exact8k1",
                                      "perf8k1", "bogus8"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            parse_multiplier_spec(text)


class TestValidation:
    def test_parameter_ranges(self):
        with pytest.raises(ValueError):
            AxMultiplier("m", 8, "truncate_lsb", k=8)
        with pytest.raises(ValueError):
            AxMultiplier("m", 8, "perforate_pp", r=-1)
        with pytest.raises(ValueError):
            AxMultiplier("m", 1, "exact")
        with pytest.raises(ValueError):
            AxMultiplier("m", 8, "exact", power_mw=-0.1)
