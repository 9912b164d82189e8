import numpy as np
import pytest

from wscifusion import formats, inference, network, synth
from wscifusion.core import RngStream
from wscifusion.inference import TileJob

OFFSETS = (0, 3, 6, 9)


@pytest.fixture(scope="module")
def world():
    w = synth.SyntheticWorld(seed=4, size=64)
    return w, w.layers(0)


@pytest.fixture(scope="module")
def model(world):
    w, stack = world
    wins = np.stack([inference.window_input(stack, w.grid, r, c, 16)
                     for r in range(0, 49, 8) for c in range(0, 49, 8)]).astype(np.float64)
    std = wins.std(axis=(0, 2, 3))
    std[std < 1e-12] = 1.0
    spec = network.tiny_spec().with_norm(wins.mean(axis=(0, 2, 3)), std)
    return network.build_model(spec, RngStream(0))


def _full_job(H, W):
    return TileJob(0, 0, 0, H, W)


def test_compose_sigma_identity():
    assert inference.compose_sigma(3.0, 4.0) == np.float32(5.0)
    g = np.random.default_rng(0)
    a, b = g.uniform(0, 3, 1000), g.uniform(0, 3, 1000)
    t = inference.compose_sigma(a, b).astype(np.float64)
    np.testing.assert_allclose(t * t, a * a + b * b, rtol=1e-6)


def test_mosaic_bands_satisfy_identity(world, model):
    w, stack = world
    mosaic, _ = inference.run_tiles(model, inference.plan_tiles(64, 64, 32), stack, w.grid,
                                    offsets=OFFSETS, seed=1)
    sd = mosaic.sigma_data.astype(np.float64)
    sm = mosaic.sigma_model.astype(np.float64)
    st = mosaic.sigma_total.astype(np.float64)
    ok = np.isfinite(sm)
    assert ok.sum() > 1000
    np.testing.assert_allclose(st[ok] ** 2, sd[ok] ** 2 + sm[ok] ** 2, rtol=1e-6)
    assert np.all(mosaic.mean[ok] > 0) and np.all(sm[ok] > 0)


def test_identical_passes_have_zero_model_sigma(model):
    stack = np.full((7, 48, 48), 0.3, np.float32)
    w = synth.SyntheticWorld(size=48)
    job = _full_job(48, 48)
    tile = inference.ensemble_predict(model, job, stack, w.grid, offsets=(5,) * 5, mc=False)
    single = inference.ensemble_predict(model, job, stack, w.grid, offsets=(5,), mc=False)
    ok = tile.count > 0
    assert ok.any()
    assert np.all(tile.sigma_model[ok] == 0.0)
    assert np.array_equal(tile.mean, single.mean, equal_nan=True)
    assert np.array_equal(tile.sigma_data, single.sigma_data, equal_nan=True)
    assert tile.count.max() == 5 and single.count.max() == 1


def test_window_prediction_matches_direct_forward(world, model):
    w, stack = world
    spec = model.spec
    tile = inference.ensemble_predict(model, _full_job(64, 64), stack, w.grid, offsets=(0,),
                                      mc=False)
    # offset 0 puts a core at rows/cols [12, 24) from an input window at 10
    win = inference.window_input(stack, w.grid, 10, 10, spec.input_size)
    out = inference.predict_window(model, win, "eval")
    c = spec.output_size
    np.testing.assert_array_equal(tile.mean[12:12 + c, 12:12 + c], out[0])
    np.testing.assert_array_equal(tile.sigma_data[12:12 + c, 12:12 + c],
                                  np.sqrt(out[1].astype(np.float64)).astype(np.float32))


def test_predict_window_modes(world, model):
    w, stack = world
    win = inference.window_input(stack, w.grid, 3, 7, 16)
    a = inference.predict_window(model, win, "eval")
    assert a.shape == (2, 12, 12) and np.all(a > 0)
    assert np.array_equal(a, inference.predict_window(model, win, "eval"))
    rng = RngStream(2)
    m1 = inference.predict_window(model, win, "mc", rng, draw=1)
    m2 = inference.predict_window(model, win, "mc", rng, draw=2)
    assert not np.array_equal(m1, m2)


def _coverage_oracle(H, W, spec, offsets, passes):
    """Brute force: for each offset, the window covering a pixel must lie
    fully inside the raster."""
    core, b, S = spec.output_size, spec.border, spec.input_size
    count = np.zeros((H, W), int)
    for off in offsets:
        for i in range(H):
            for j in range(W):
                r0 = i - (i + off) % core  # core origin covering row i
                c0 = j - (j + off) % core
                if r0 - b >= 0 and c0 - b >= 0 and r0 - b + S <= H and c0 - b + S <= W:
                    count[i, j] += passes
    return count


def test_interior_pixels_get_every_pass(world, model):
    w, stack = world
    tile = inference.ensemble_predict(model, _full_job(64, 64), stack, w.grid, offsets=OFFSETS,
                                      mc_passes=2, rng=RngStream(0))
    want = _coverage_oracle(64, 64, model.spec, OFFSETS, 2)
    np.testing.assert_array_equal(tile.count, want)
    assert tile.passes == 8
    interior = want == 8
    assert interior[20:44, 20:44].all()
    assert np.all(np.isfinite(tile.sigma_model[interior]))
    assert np.all(np.isnan(tile.sigma_model[want < 2]))
    assert np.all(np.isnan(tile.mean[want == 0]))


def test_single_tile_mosaic_equals_tile(world, model):
    w, stack = world
    tile = inference.ensemble_predict(model, _full_job(64, 64), stack, w.grid, offsets=OFFSETS,
                                      rng=RngStream(0))
    mos = inference.stitch_mosaic([tile], 64, 64)
    for band, arr in zip(inference.BANDS, mos.bands):
        np.testing.assert_array_equal(arr, getattr(tile, band))
    np.testing.assert_array_equal(mos.count, tile.count)


def test_overlapping_identical_tiles_leave_strip_unchanged(world, model):
    w, stack = world
    a = inference.ensemble_predict(model, TileJob(0, 0, 0, 64, 40), stack, w.grid,
                                   offsets=OFFSETS, mc=False)
    b = inference.ensemble_predict(model, TileJob(1, 0, 24, 64, 40), stack, w.grid,
                                   offsets=OFFSETS, mc=False)
    # in eval mode both tiles predict the overlap identically
    np.testing.assert_array_equal(a.mean[:, 24:], b.mean[:, :16])
    mos = inference.stitch_mosaic([b, a], 64, 64)
    strip = mos.mean[:, 24:40]
    np.testing.assert_array_equal(strip, a.mean[:, 24:])
    np.testing.assert_array_equal(mos.sigma_data[:, 24:40], a.sigma_data[:, 24:])
    np.testing.assert_array_equal(mos.sigma_model[:, 24:40], a.sigma_model[:, 24:])


def test_worker_count_and_order_do_not_matter(world, model):
    w, stack = world
    jobs = inference.plan_tiles(64, 64, 24)
    one, r1 = inference.run_tiles(model, jobs, stack, w.grid, workers=1, seed=5, offsets=OFFSETS)
    eight, r8 = inference.run_tiles(model, jobs[::-1], stack, w.grid, workers=8, seed=5,
                                    offsets=OFFSETS)
    assert one.bands.tobytes() == eight.bands.tobytes()
    assert one.count.tobytes() == eight.count.tobytes()
    assert r1.pixels == r8.pixels == 64 * 64 and r8.workers == 8
    other, _ = inference.run_tiles(model, jobs, stack, w.grid, seed=6, offsets=OFFSETS)
    assert other.bands.tobytes() != one.bands.tobytes()


def test_empty_job_set(world, model):
    w, stack = world
    mos, rep = inference.run_tiles(model, [], stack, w.grid)
    assert rep.pixels == 0 and rep.tiles == 0 and rep.failed == []
    assert np.all(np.isnan(mos.bands)) and not mos.count.any()


def test_failing_tile_retried_then_left_as_hole(world, model, monkeypatch, caplog):
    w, stack = world
    real = inference.ensemble_predict
    calls = {}

    def flaky(model, job, *a, **k):
        calls[job.tile_id] = calls.get(job.tile_id, 0) + 1
        if job.tile_id == 1 or (job.tile_id == 2 and calls[2] == 1):
            raise RuntimeError("disk hiccup")
        return real(model, job, *a, **k)

    monkeypatch.setattr(inference, "ensemble_predict", flaky)
    jobs = inference.plan_tiles(64, 64, 32)
    mos, rep = inference.run_tiles(model, jobs, stack, w.grid, offsets=OFFSETS)
    assert rep.failed == [1]
    assert calls == {0: 1, 1: 2, 2: 2, 3: 1}
    assert np.all(np.isnan(mos.mean[:32, 32:]))
    assert np.isfinite(mos.mean[40, 20])
    assert "tile 1 attempt 2 failed" in caplog.text
    assert rep.pixels == 3 * 32 * 32


def test_nodata_inputs_become_holes(world, model):
    w, stack = world
    holed = stack.copy()
    holed[2, 30, 30] = np.nan
    mos, _ = inference.run_tiles(model, [_full_job(64, 64)], holed, w.grid, offsets=OFFSETS)
    assert np.isnan(mos.mean[30, 30]) and mos.count[30, 30] == 0
    # windows touching the hole are dropped, others still cover neighbours
    assert np.isfinite(mos.mean[10, 10])


def test_mosaic_save_roundtrip(tmp_path, world, model):
    w, stack = world
    mos, _ = inference.run_tiles(model, [_full_job(64, 64)], stack, w.grid, offsets=OFFSETS)
    mos.save(tmp_path / "m.f32", w.grid)
    bands, meta = formats.read_raster(tmp_path / "m.f32")
    assert bands.tobytes() == mos.bands.tobytes()
    assert meta["bands"] == list(inference.BANDS)
    assert meta["offsets"] == list(OFFSETS) and meta["mc_passes"] == 1
    assert meta["checkpoint_hash"] == inference.model_digest(model)


def test_seam_helpers():
    assert inference.seam_positions(0, 40, 12, (0,)) == [12, 24, 36]
    assert inference.seam_positions(0, 20, 12, (0, 3)) == [9, 12]
    field = np.zeros((6, 6))
    field[3:] = 2.0
    assert inference.max_seam_jump(field, [3], []) == 2.0
    assert inference.max_seam_jump(field, [2], [3]) == 0.0
