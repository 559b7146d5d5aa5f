"""Localiser variant behaviour: enumeration, feature handling, training,
the classical pipeline, TAoA-to-position scoring, and frozen-backbone heads."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from radiobench.channel_sim import (
    RadioConfig,
    SamplingConfig,
    Scatterer,
    cir_to_csi,
    simulate_dataset,
    synthesize_cir,
    PathComponent,
)
from radiobench.errors import (
    ConfigurationError,
    DomainError,
    EstimationError,
    ShapeError,
)
from radiobench.geometry import SPEED_OF_LIGHT, position_to_taoa
from radiobench.localiser_zoo import (
    CANONICAL_VARIANTS,
    ChartNormConfig,
    HeadSpec,
    IdentityBackbone,
    ModelVariant,
    VariantSpec,
    attach_head,
    build_variant,
    classical_localise,
    classical_positions,
    classical_taoa,
    grid_averaged_errors,
    load_variant,
    normalize_channel,
    position_errors,
    predict_positions,
    save_variant,
    taoa_rows_to_positions,
    variant_by_name,
    _sinc_edge_offset,
    _sinc_peak_offset,
)
from radiobench.nn_core import TrainConfig

from conftest import ring_poses, small_radio, small_scene


# ---------------------------------------------------------------------------
# Shared fixtures: one mildly noisy 4-locator dataset reused across the
# training tests, plus a fixed train/val/test index split.


@pytest.fixture(scope="module")
def zoo_radio():
    return small_radio()


@pytest.fixture(scope="module")
def zoo_dataset(zoo_radio):
    scene = small_scene(n_loc=4, seed=5)
    return simulate_dataset(
        scene,
        zoo_radio,
        SamplingConfig(mode="grid", grid_pitch_m=0.7, z=1.5),
        n_samples=160,
        noise_std=0.02,
        seed=9,
    )


@pytest.fixture(scope="module")
def zoo_split():
    return np.arange(120), np.arange(120, 140), np.arange(140, 160)


def quick_cfg(seed: int = 0, epochs: int = 120) -> TrainConfig:
    return TrainConfig(learning_rate=2e-3, batch_size=32, epochs=epochs, seed=seed)


# ---------------------------------------------------------------------------
# Variant enumeration


def test_exactly_ten_variants_constructible(zoo_radio):
    assert len(CANONICAL_VARIANTS) == 10
    for name in CANONICAL_VARIANTS:
        v = variant_by_name(name, zoo_radio)
        assert v.name == name


def test_chart_variants_accept_raw_input_aliases(zoo_radio):
    for raw, reduced, name in (
        ("CSI", "ReducedCsi", "CSI-CC"),
        ("PER", "ReducedPer", "PER-CC"),
    ):
        v = build_variant(
            VariantSpec(input=raw, output="Chart", family="ChannelChart"), zoo_radio
        )
        assert v.name == name
        assert v.spec.input == reduced


@pytest.mark.parametrize(
    "combo",
    [
        ("TAoA", "Latent", "Autoencoder"),
        ("CSI", "Chart", "Supervised"),
        ("TAoA", "Chart", "ChannelChart"),
        ("PER", "Position", "Classical"),
        ("TAoA", "TAoA", "Supervised"),
        ("ReducedCsi", "Position", "Supervised"),
    ],
)
def test_unlisted_combinations_rejected(zoo_radio, combo):
    inp, out, fam = combo
    with pytest.raises(ConfigurationError):
        build_variant(VariantSpec(input=inp, output=out, family=fam), zoo_radio)


def test_unknown_variant_name_rejected(zoo_radio):
    with pytest.raises(ConfigurationError, match="unknown variant"):
        variant_by_name("CSI2Velocity", zoo_radio)


def test_variant_spec_round_trips_through_dict():
    spec = VariantSpec(input="PER", output="Latent", family="Autoencoder",
                       latent_dim=8, chart_dim=3)
    assert VariantSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(input="IQ", output="Position", family="Supervised"),
        dict(input="CSI", output="Velocity", family="Supervised"),
        dict(input="CSI", output="Position", family="Bagging"),
        dict(input="CSI", output="Latent", family="Autoencoder", latent_dim=0),
        dict(input="CSI", output="Chart", family="ChannelChart", chart_dim=4),
    ],
)
def test_invalid_spec_fields_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        VariantSpec(**kwargs)


# ---------------------------------------------------------------------------
# Channel normalisation


def test_unit_exponent_always_gives_unit_frobenius_norm():
    rng = np.random.default_rng(3)
    cfg = ChartNormConfig(pathloss_exponent=1.0, n_antennas=4)
    for _ in range(20):
        h = rng.standard_normal((4, 16)) + 1j * rng.standard_normal((4, 16))
        out = normalize_channel(h, cfg)
        assert math.isclose(np.linalg.norm(out), 1.0, rel_tol=1e-12)


def test_normalisation_matches_scalar_formula():
    rng = np.random.default_rng(4)
    h = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
    cfg = ChartNormConfig(pathloss_exponent=2.0, n_antennas=4)
    expected = (4.0 ** 1.0 / np.linalg.norm(h) ** 2.0) * h
    assert np.allclose(normalize_channel(h, cfg), expected, atol=1e-12)


def test_zero_channel_cannot_be_normalised():
    cfg = ChartNormConfig(pathloss_exponent=2.0, n_antennas=2)
    with pytest.raises(DomainError):
        normalize_channel(np.zeros((2, 8), dtype=complex), cfg)


# ---------------------------------------------------------------------------
# Feature plumbing and fit-state guards


def test_feature_standardisation_uses_train_statistics_only(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    v = variant_by_name("CSI2Pos", zoo_dataset.radio, hidden=(16,))
    v.fit(zoo_dataset, tr, va, quick_cfg(epochs=2))
    raw = v.raw_features(zoo_dataset)
    assert np.allclose(v.feat_mean, raw[tr].mean(axis=0))
    std = raw[tr].std(axis=0)
    assert np.allclose(v.feat_std, np.where(std > 1e-8, std, 1.0))


def test_predict_before_fit_is_rejected(zoo_dataset):
    v = variant_by_name("CSI2Pos", zoo_dataset.radio)
    with pytest.raises(ConfigurationError):
        v.predict(zoo_dataset)


def test_autoencoder_has_no_supervised_labels(zoo_dataset):
    v = variant_by_name("CSI-AE", zoo_dataset.radio)
    with pytest.raises(ConfigurationError):
        v.labels(zoo_dataset)


def test_reconstruct_is_autoencoder_only(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    v = variant_by_name("CSI2Pos", zoo_dataset.radio, hidden=(16,))
    v.fit(zoo_dataset, tr, va, quick_cfg(epochs=2))
    with pytest.raises(ConfigurationError):
        v.reconstruct(zoo_dataset)


def test_classical_baseline_has_no_embedding(zoo_dataset):
    v = variant_by_name("Classical", zoo_dataset.radio)
    with pytest.raises(ConfigurationError):
        v.embed(zoo_dataset)


# ---------------------------------------------------------------------------
# Supervised training


def test_supervised_training_reduces_loss_and_predicts_positions(
    zoo_dataset, zoo_split
):
    tr, va, te = zoo_split
    v = variant_by_name("CSI2Pos", zoo_dataset.radio, hidden=(32,))
    hist = v.fit(zoo_dataset, tr, va, quick_cfg())
    assert hist.train[-1] < hist.train[0]
    pred = v.predict(zoo_dataset, te)
    assert pred.shape == (len(te), 3)
    assert np.all(np.isfinite(pred))


def test_fit_and_predict_are_deterministic(zoo_dataset, zoo_split):
    tr, va, te = zoo_split

    def run():
        v = variant_by_name("PER2Pos", zoo_dataset.radio, hidden=(16,))
        v.fit(zoo_dataset, tr, va, quick_cfg(epochs=30))
        return v.predict(zoo_dataset, te)

    assert np.array_equal(run(), run())


def test_geometric_inputs_beat_raw_channel_inputs(zoo_dataset, zoo_split):
    # Positions are nearly a closed-form function of the TAoA triples, so a
    # net fed TAoA labels upper-bounds what any channel-input net can learn
    # from the same scene.
    tr, va, te = zoo_split
    for seed in range(3):
        meds = {}
        for name in ("TAoA2Pos", "CSI2Pos"):
            v = variant_by_name(name, zoo_dataset.radio, hidden=(32,))
            v.fit(zoo_dataset, tr, va, quick_cfg(seed=seed, epochs=150))
            meds[name] = np.median(position_errors(v, zoo_dataset, te))
        assert meds["TAoA2Pos"] < meds["CSI2Pos"]


# ---------------------------------------------------------------------------
# Autoencoders


def test_autoencoder_learns_to_reconstruct(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    v = variant_by_name("CSI-AE", zoo_dataset.radio, hidden=(32,), latent_dim=8)
    hist = v.fit(zoo_dataset, tr, va, quick_cfg())
    assert hist.train[-1] < hist.train[0]
    z = v.embed(zoo_dataset, tr[:5])
    assert z.shape == (5, 8)
    rec = v.reconstruct(zoo_dataset, tr[:5])
    assert rec.shape == (5, v.raw_features(zoo_dataset).shape[1])


# ---------------------------------------------------------------------------
# Channel charting


def test_chart_embedding_has_chart_dimension(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    v = variant_by_name("CSI-CC", zoo_dataset.radio, hidden=(16,), chart_dim=2)
    hist = v.fit(zoo_dataset, tr, va, quick_cfg(epochs=40))
    assert all(np.isfinite(hist.train))
    assert min(hist.train) < hist.train[0]
    z = v.embed(zoo_dataset)
    assert z.shape == (len(zoo_dataset), 2)


def test_chart_norm_config_captured_from_training_scene(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    v = variant_by_name("PER-CC", zoo_dataset.radio, hidden=(16,))
    v.fit(zoo_dataset, tr, va, quick_cfg(epochs=5))
    assert v.norm_cfg == ChartNormConfig(
        pathloss_exponent=zoo_dataset.scene.pathloss_exponent,
        n_antennas=zoo_dataset.radio.n_antennas_per_locator,
    )
    # Inference on another dataset must reuse the stats captured at fit
    # time rather than recomputing them.
    mean_before = v.feat_mean.copy()
    other = simulate_dataset(
        replace(zoo_dataset.scene, pathloss_exponent=2.5),
        zoo_dataset.radio,
        SamplingConfig(mode="grid", grid_pitch_m=1.1, z=1.4),
        n_samples=10,
        noise_std=0.0,
        seed=33,
    )
    v.embed(other)
    assert np.array_equal(v.feat_mean, mean_before)


def test_triplet_pairs_respect_temporal_windows(zoo_dataset):
    v = variant_by_name("CSI-CC", zoo_dataset.radio)
    train = np.arange(len(zoo_dataset))
    v._make_triplet_pairs(zoo_dataset, (train,), seed=0)
    pos_pick, neg_pick = v._triplet_pairs
    t = zoo_dataset.time_index.astype(np.int64)
    for i in train:
        p_gap = abs(t[pos_pick[i]] - t[i])
        n_gap = abs(t[neg_pick[i]] - t[i])
        assert 1 <= p_gap <= 15
        assert n_gap >= 80


def test_triplet_negatives_fall_back_to_farthest_quartile(zoo_dataset):
    # A training window narrower than the negative gap still has to
    # produce negatives: they come from the farthest quarter of the pool.
    v = variant_by_name("CSI-CC", zoo_dataset.radio)
    train = np.arange(60)
    v._make_triplet_pairs(zoo_dataset, (train,), seed=0)
    _, neg_pick = v._triplet_pairs
    t = zoo_dataset.time_index.astype(np.int64)
    for i in train:
        gaps = np.abs(t[train] - t[i])
        cutoff = np.sort(gaps)[-max(1, len(train) // 4)]
        assert abs(t[neg_pick[i]] - t[i]) >= cutoff


def test_triplet_pairs_never_cross_split_groups(zoo_dataset):
    v = variant_by_name("CSI-CC", zoo_dataset.radio)
    train, val = np.arange(120), np.arange(120, 140)
    v._make_triplet_pairs(zoo_dataset, (train, val), seed=0)
    pos_pick, neg_pick = v._triplet_pairs
    assert set(pos_pick[val]) <= set(val)
    assert set(neg_pick[val]) <= set(val)
    assert set(pos_pick[train]) <= set(train)
    assert set(neg_pick[train]) <= set(train)


# ---------------------------------------------------------------------------
# Classical pipeline: interpolators


def sinc_taps(n: int, order: int, frac_peak: float, amp: complex) -> np.ndarray:
    k = np.arange(order)
    taps = np.zeros(n, dtype=complex)
    taps[:order] = amp * np.sinc(k - frac_peak)
    return taps


@pytest.mark.parametrize("delta", [-0.49, -0.25, -0.1, 0.0, 0.1, 0.33, 0.49])
def test_delay_interpolator_exact_on_band_limited_pulse(delta):
    taps = sinc_taps(64, 32, 5.0 + delta, amp=0.4 - 1.1j)
    est = 5.0 + _sinc_peak_offset(taps[4], taps[5], taps[6])
    assert est == pytest.approx(5.0 + delta, abs=1e-9)


@pytest.mark.parametrize("frac", [0.05, 0.2, 0.49])
def test_first_bin_peak_uses_one_sided_interpolation(frac):
    taps = sinc_taps(64, 32, frac, amp=1.0 + 0.5j)
    est = _sinc_edge_offset(taps[0], taps[1])
    assert est == pytest.approx(frac, abs=1e-9)


def test_classical_taoa_recovers_broadside_geometry():
    # User level with the array (zero elevation) so the direction cosine
    # maps straight back to azimuth.
    radio = RadioConfig.desk_default()
    pose = ring_poses(1, size=10.0, z_levels=(2.0,))[0]
    for user in (
        np.array([5.0, 5.0, 2.0]),
        np.array([6.5, 3.0, 2.0]),
        np.array([2.0, 6.0, 2.0]),
    ):
        truth = position_to_taoa(pose, user)
        cirs = []
        from radiobench.channel_sim import scene_to_paths

        scene = small_scene(n_loc=1, locators=(pose,))
        paths = scene_to_paths(scene, 0, user, radio)
        csi = cir_to_csi(
            np.array([synthesize_cir(p, radio) for p in paths]), radio
        )
        est = classical_taoa(csi, radio)
        assert est.range == pytest.approx(truth.range, abs=2e-3)
        assert est.azimuth == pytest.approx(truth.azimuth, abs=math.radians(0.3))
        assert est.elevation == 0.0


def test_equal_power_paths_resolve_to_lowest_delay_bin():
    # Two broadside paths with identical complex amplitude produce two
    # identical periodogram peaks; the earlier delay must win.
    radio = small_radio()
    fc, ts = radio.carrier_hz, radio.sample_period_s
    k = np.arange(radio.channel_order)
    cir = np.sinc(k - 3.0) + np.sinc(k - 6.0)   # unit amplitude at both delays
    cirs = np.array([cir, cir])                 # broadside: no steering phase
    csi = cir_to_csi(cirs, radio)
    est = classical_taoa(csi, radio)
    assert est.range == pytest.approx(3.0 * ts * SPEED_OF_LIGHT, rel=1e-9)
    assert est.azimuth == pytest.approx(0.0, abs=1e-9)


def test_flat_periodogram_has_no_peak(zoo_radio):
    with pytest.raises(EstimationError):
        classical_taoa(
            np.zeros((2, zoo_radio.n_subcarriers), dtype=complex), zoo_radio
        )


def test_classical_localisation_needs_two_locators(zoo_radio):
    ds = simulate_dataset(
        small_scene(n_loc=1),
        zoo_radio,
        SamplingConfig(mode="grid", grid_pitch_m=1.1, z=1.5),
        n_samples=2,
        noise_std=0.0,
        seed=1,
    )
    with pytest.raises(ConfigurationError):
        classical_localise(ds, 0)


# ---------------------------------------------------------------------------
# Classical pipeline: end to end


@pytest.fixture(scope="module")
def clean_six_locator_dataset():
    return simulate_dataset(
        small_scene(n_loc=6),
        RadioConfig.desk_default(),
        SamplingConfig(mode="grid", grid_pitch_m=1.7, z=1.5),
        n_samples=6,
        noise_std=0.0,
        seed=3,
    )


def test_classical_noiseless_accuracy_under_five_centimetres(
    clean_six_locator_dataset
):
    ds = clean_six_locator_dataset
    errs = np.linalg.norm(classical_positions(ds) - ds.positions, axis=1)
    assert errs.max() < 0.05


def test_classical_pipeline_is_deterministic(clean_six_locator_dataset):
    ds = clean_six_locator_dataset
    a = classical_localise(ds, 0)
    b = classical_localise(ds, 0)
    assert np.array_equal(a.position, b.position)
    assert a.transmit_time == b.transmit_time


def test_scattering_strictly_degrades_classical_accuracy():
    radio = RadioConfig.desk_default()
    base = small_scene(n_loc=6, seed=5)
    wins = 0
    clean_errs, scat_errs = [], []
    for s in range(8):
        rng = np.random.default_rng([s, 77])
        scats = tuple(
            Scatterer(position=rng.uniform([0, 0, 0], [10, 10, 3]),
                      reflectivity=0.8)
            for _ in range(10)
        )
        pair = {}
        for tag, scene in (("clean", base), ("scat", replace(base, scatterers=scats))):
            ds = simulate_dataset(
                scene, radio,
                SamplingConfig(mode="grid", grid_pitch_m=1.3, z=1.5),
                n_samples=1, noise_std=0.0, seed=100 + s,
            )
            est = classical_localise(ds, 0)
            pair[tag] = float(np.linalg.norm(est.position - ds.positions[0]))
        clean_errs.append(pair["clean"])
        scat_errs.append(pair["scat"])
        wins += pair["scat"] > pair["clean"]
    assert wins >= 7
    assert np.median(scat_errs) > np.median(clean_errs)


def test_grid_averaging_not_worse_than_per_sample_median():
    rng = np.random.default_rng(12)
    truths = np.repeat(rng.uniform(0, 10, (6, 3)), 10, axis=0)
    estimates = truths + rng.normal(0, 0.4, truths.shape)
    labels = np.repeat(np.arange(6), 10)
    per_sample = np.linalg.norm(estimates - truths, axis=1)
    cell_errors = grid_averaged_errors(estimates, truths, labels)
    assert cell_errors.shape == (6,)
    assert np.median(cell_errors) <= np.median(per_sample)


def test_grid_averaging_rejects_misaligned_inputs():
    with pytest.raises(ShapeError):
        grid_averaged_errors(np.zeros((4, 3)), np.zeros((5, 3)), np.zeros(5))


# ---------------------------------------------------------------------------
# TAoA rows to positions


def test_true_taoa_rows_recover_positions(clean_six_locator_dataset):
    ds = clean_six_locator_dataset
    rows = ds.taoa.reshape(len(ds), -1)[:3]
    out = taoa_rows_to_positions(ds, rows)
    assert np.allclose(out, ds.positions[:3], atol=1e-4)


def test_out_of_range_taoa_rows_are_sanitised(zoo_radio):
    ds = simulate_dataset(
        small_scene(n_loc=2),
        zoo_radio,
        SamplingConfig(mode="grid", grid_pitch_m=1.1, z=1.5),
        n_samples=1,
        noise_std=0.0,
        seed=2,
    )
    rows = np.array([[7.0, 2.5, -4.0, -9.0, -2.0, 3.0]])
    out = taoa_rows_to_positions(ds, rows)
    assert out.shape == (1, 3)
    assert np.all(np.isfinite(out))


def test_latent_outputs_cannot_be_scored_as_positions(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    v = variant_by_name("CSI-AE", zoo_dataset.radio, hidden=(16,), latent_dim=4)
    v.fit(zoo_dataset, tr, va, quick_cfg(epochs=2))
    with pytest.raises(ConfigurationError):
        predict_positions(v, zoo_dataset, [0, 1])


# ---------------------------------------------------------------------------
# Checkpointing


def test_variant_checkpoint_round_trip(zoo_dataset, zoo_split, tmp_path):
    tr, va, te = zoo_split
    v = variant_by_name("CSI2Pos", zoo_dataset.radio, hidden=(16,))
    v.fit(zoo_dataset, tr, va, quick_cfg(epochs=10))
    path = tmp_path / "variant.ckpt"
    save_variant(v, path)
    loaded = load_variant(path)
    assert loaded.name == v.name
    assert np.array_equal(loaded.predict(zoo_dataset, te), v.predict(zoo_dataset, te))


def test_autoencoder_checkpoint_round_trip(zoo_dataset, zoo_split, tmp_path):
    tr, va, te = zoo_split
    v = variant_by_name("CSI-AE", zoo_dataset.radio, hidden=(16,), latent_dim=4)
    v.fit(zoo_dataset, tr, va, quick_cfg(epochs=10))
    path = tmp_path / "ae.ckpt"
    save_variant(v, path)
    loaded = load_variant(path)
    assert np.array_equal(
        loaded.reconstruct(zoo_dataset, te), v.reconstruct(zoo_dataset, te)
    )


def test_checkpoint_header_carries_variant_key(zoo_dataset, zoo_split, tmp_path):
    tr, va, _ = zoo_split
    v = variant_by_name("PER2Pos", zoo_dataset.radio, hidden=(16,))
    v.fit(zoo_dataset, tr, va, quick_cfg(epochs=2))
    path = tmp_path / "header.ckpt"
    save_variant(v, path)
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    assert header["extra"]["variant"] == v.spec.to_dict()


# ---------------------------------------------------------------------------
# Frozen-backbone heads


def test_identity_backbone_head_reduces_to_plain_supervised(zoo_dataset, zoo_split):
    tr, va, te = zoo_split
    cfg = quick_cfg(epochs=60)

    sup = variant_by_name("CSI2Pos", zoo_dataset.radio, hidden=(32,))
    sup_hist = sup.fit(zoo_dataset, tr, va, cfg)

    backbone = IdentityBackbone(variant_by_name("CSI2Pos", zoo_dataset.radio))
    head = attach_head(backbone, HeadSpec(hidden=32, train=cfg),
                       (zoo_dataset, tr, va))

    assert head.history.train == sup_hist.train
    assert head.history.val == sup_hist.val
    assert np.array_equal(head.predict(zoo_dataset, te), sup.predict(zoo_dataset, te))


def test_attach_head_leaves_backbone_untouched(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    ae = variant_by_name("CSI-AE", zoo_dataset.radio, hidden=(16,), latent_dim=4)
    ae.fit(zoo_dataset, tr, va, quick_cfg(epochs=10))
    before = [p.values.copy() for net in ae.nets.values() for p in net.parameters()]
    attach_head(ae, HeadSpec(hidden=16), (zoo_dataset, tr, va))
    after = [p.values for net in ae.nets.values() for p in net.parameters()]
    for a, b in zip(before, after):
        assert np.array_equal(a, b)


def test_autoencoder_head_close_to_supervised_accuracy(zoo_dataset, zoo_split):
    # A frozen unsupervised backbone with a small labelled head should stay
    # within a factor two of the fully supervised net on the same data.
    tr, va, te = zoo_split
    ratios = []
    for seed in range(3):
        cfg = quick_cfg(seed=seed, epochs=200)
        sup = variant_by_name("CSI2Pos", zoo_dataset.radio, hidden=(32,))
        sup.fit(zoo_dataset, tr, va, cfg)
        sup_err = np.median(position_errors(sup, zoo_dataset, te))

        ae = variant_by_name("CSI-AE", zoo_dataset.radio, hidden=(32,), latent_dim=16)
        ae.fit(zoo_dataset, tr, va, cfg)
        head = attach_head(ae, HeadSpec(hidden=32, train=cfg), (zoo_dataset, tr, va))
        ratios.append(np.median(head.position_errors(zoo_dataset, te)) / sup_err)
    assert np.median(ratios) <= 2.0


# ---------------------------------------------------------------------------
# Training objectives for landscape analysis


def test_supervised_objective_reproduces_fit_loss(zoo_dataset, zoo_split):
    from radiobench.nn_core import forward, mse_loss

    tr, va, _ = zoo_split
    sup = variant_by_name("CSI2Pos", zoo_dataset.radio, hidden=(16,))
    sup.fit(zoo_dataset, tr, va, quick_cfg(epochs=15))
    model, loss_fn = sup.training_objective(zoo_dataset)
    got = loss_fn(model, tr).item()
    feats = sup.features(zoo_dataset, tr)
    expected = mse_loss(
        forward(sup.nets["net"], feats), zoo_dataset.positions[tr]
    ).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_autoencoder_objective_shares_parameters_with_nets(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    ae = variant_by_name("CSI-AE", zoo_dataset.radio, hidden=(16,), latent_dim=4)
    ae.fit(zoo_dataset, tr, va, quick_cfg(epochs=10))
    model, loss_fn = ae.training_objective(zoo_dataset)
    # reconstruction loss through the combined chain equals encoder+decoder
    feats = ae.features(zoo_dataset, tr)
    recon = ae.reconstruct(zoo_dataset, tr)
    expected = np.mean(np.sum((recon - feats) ** 2, axis=1))
    assert loss_fn(model, tr).item() == pytest.approx(expected, rel=1e-9)
    # the chained model aliases the variant's parameter tensors
    enc_params = {id(p) for p in ae.nets["encoder"].parameters()}
    dec_params = {id(p) for p in ae.nets["decoder"].parameters()}
    combined = {id(p) for p in model.parameters()}
    assert combined == enc_params | dec_params


def test_chart_objective_uses_stored_triplets(zoo_dataset, zoo_split):
    tr, va, _ = zoo_split
    cc = variant_by_name("CSI-CC", zoo_dataset.radio, hidden=(16,), chart_dim=2)
    cc.fit(zoo_dataset, tr, va, quick_cfg(epochs=10))
    model, loss_fn = cc.training_objective(zoo_dataset)
    val = loss_fn(model, tr).item()
    assert np.isfinite(val) and val >= 0.0


def test_objective_rejects_classical_and_unfitted(zoo_dataset):
    classical = variant_by_name("Classical", zoo_dataset.radio)
    with pytest.raises(ConfigurationError):
        classical.training_objective(zoo_dataset)
    fresh = variant_by_name("CSI2Pos", zoo_dataset.radio)
    with pytest.raises(ConfigurationError):
        fresh.training_objective(zoo_dataset)
