import hashlib
import json
import math

import numpy as np
import pytest
from scipy import signal as sps

from sfd.exceptions import AssetError
from sfd.features import (
    ArrayGeometry,
    classic_doa_estimate,
    cross_power_spectrum,
    gcc,
    itd_from_gcc_argmax,
)
from sfd.scene import (
    Assets,
    SceneSpec,
    SphericalHeadModel,
    SynthConfig,
    add_diffuse_noise,
    analytic_hrir,
    child_rng,
    diffuse_noise,
    noise_source,
    read_manifest,
    render,
    render_dataset,
    sample_scene,
    stable_seed,
    synthetic_speech,
)
from sfd.signal import AudioBuffer, snr_db, stft, write_wav


def source(seconds=1.0, seed=0):
    return AudioBuffer(synthetic_speech(seconds, np.random.default_rng(seed)))


def welch_coherence(buf, nperseg=256):
    f, pxy = sps.csd(buf.samples[0], buf.samples[1], fs=buf.sample_rate, nperseg=nperseg)
    _, pxx = sps.welch(buf.samples[0], fs=buf.sample_rate, nperseg=nperseg)
    _, pyy = sps.welch(buf.samples[1], fs=buf.sample_rate, nperseg=nperseg)
    return f, np.real(pxy) / np.sqrt(pxx * pyy)


class TestHrir:
    def test_frontal_symmetry(self):
        left, right = analytic_hrir(0.0)
        np.testing.assert_array_equal(left, right)

    def test_woodworth_itd_at_90(self):
        assert SphericalHeadModel().itd(90.0) == pytest.approx(0.0875 / 343 * (math.pi / 2 + 1))
        assert SphericalHeadModel().itd(90.0) == pytest.approx(6.558e-4, rel=1e-3)

    @pytest.mark.parametrize("az", [10.0, 37.5, 90.0])
    def test_mirror(self, az):
        l1, r1 = analytic_hrir(az)
        l2, r2 = analytic_hrir(-az)
        np.testing.assert_array_equal(l1, r2)
        np.testing.assert_array_equal(r1, l2)

    def test_group_delay_matches_itd(self):
        # centroid of each windowed-sinc response sits at its fractional delay
        left, right = analytic_hrir(60.0)
        taps = np.arange(left.size)
        delay = (taps @ right) / right.sum() - (taps @ left) / left.sum()
        assert delay == pytest.approx(SphericalHeadModel().itd(60.0) * 16000, abs=0.05)

    def test_round_trip_through_gcc(self):
        scene = render(SceneSpec(30.0, rir_id=None, noise_type="none", snr_db=math.inf),
                       source(2.0))
        X1, X2 = (stft(c) for c in scene.clean.samples)
        lags = itd_from_gcc_argmax(gcc(cross_power_spectrum(X1, X2), "phat", 20)) * 16000
        model_itd = SphericalHeadModel().itd(30.0) * 16000
        voiced = np.abs(X1.frames).sum(axis=1) > 1.0
        assert np.all(np.abs(lags[voiced] - model_itd) <= 1.0)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            analytic_hrir(95.0)


class TestSampleScene:
    def test_deterministic(self):
        assert sample_scene(child_rng(3)) == sample_scene(child_rng(3))

    def test_uniform_azimuths(self):
        rng = child_rng("uniform")
        az = np.array([sample_scene(rng).azimuth for _ in range(10000)])
        assert abs(az.mean()) < 2.0
        assert az.min() >= -90 and az.max() <= 90

    def test_single_noise_type(self):
        rng = child_rng(0)
        cfg = SynthConfig(noise_types=("pink",))
        assert {sample_scene(rng, cfg).noise_type for _ in range(50)} == {"pink"}

    def test_stable_seed_is_process_independent(self):
        assert stable_seed("a", 1) == stable_seed("a", 1) != stable_seed("a", 2)


class TestNoise:
    @pytest.mark.parametrize("kind", ["white", "pink", "babble", "speech_shaped"])
    def test_unit_rms(self, kind):
        x = noise_source(kind, 16000, child_rng(kind))
        assert np.sqrt(np.mean(x**2)) == pytest.approx(1.0)

    def test_unknown_type(self):
        with pytest.raises(AssetError):
            noise_source("traffic", 100, child_rng(0))

    def test_coherence_follows_sinc(self):
        geom = ArrayGeometry(0.18)
        buf = diffuse_noise(10.0, geom, child_rng("coh"))
        f, coh = welch_coherence(buf)
        target = np.sinc(2 * f * 0.18 / 343)
        band = f < 4000
        assert np.mean((coh[band] - target[band]) ** 2) < 0.05
        assert coh[1] > 0.9
        first_zero = 343 / (2 * 0.18)
        near = np.abs(f - first_zero) < 60
        assert np.all(np.abs(coh[near]) < 0.2)

    def test_base_noise_used(self):
        base = noise_source("pink", 40000, child_rng(1))
        buf = diffuse_noise(1.0, rng=child_rng(2), base_noise=base)
        assert buf.samples.shape == (2, 16000)
        assert np.all(np.isfinite(buf.samples))


class TestRender:
    def test_degenerate_augmentation(self):
        spec = SceneSpec(20.0, noise_type="white", snr_db=math.inf)
        scene = render(spec, source())
        np.testing.assert_array_equal(scene.clean.samples, scene.augmented.samples)
        assert scene.doa_label == 20.0

    def test_frontal_channels_identical(self):
        scene = render(SceneSpec(0.0, snr_db=math.inf), source())
        np.testing.assert_array_equal(scene.clean.samples[0], scene.clean.samples[1])

    def test_lengths_preserved(self, assets):
        src = source(1.3)
        spec = SceneSpec(-40.0, "head-03", "rir-02", "babble", 5.0, 9)
        scene = render(spec, src, assets)
        assert scene.clean.samples.shape == scene.augmented.samples.shape == (2, src.length)

    def test_mirror_render(self):
        src = source()
        a = render(SceneSpec(35.0, snr_db=math.inf), src)
        b = render(SceneSpec(-35.0, snr_db=math.inf), src)
        np.testing.assert_array_equal(a.clean.samples, b.clean.swap_channels().samples)

    def test_measured_snr(self, assets):
        spec = SceneSpec(10.0, "head-01", "rir-01", "pink", -5.0, 4)
        scene = render(spec, source(), assets)
        reverberant = render(SceneSpec(10.0, "head-01", "rir-01", "none", math.inf), source(),
                             assets).augmented
        noise = AudioBuffer(scene.augmented.samples - reverberant.samples)
        assert abs(snr_db(reverberant, noise) - spec.snr_db) < 0.1

    def test_deterministic(self, assets):
        spec = SceneSpec(-12.0, "head-05", "rir-04", "babble", 0.0, 77)
        a, b = render(spec, source(), assets), render(spec, source(), assets)
        np.testing.assert_array_equal(a.augmented.samples, b.augmented.samples)

    def test_classic_on_rendered_45(self):
        spec = SceneSpec(45.0, noise_type="white", snr_db=20.0, seed=3)
        scene = render(spec, source(3.0))
        est = classic_doa_estimate(scene.augmented, geometry=scene.geometry)
        assert abs(np.median(est[100:]) - 45.0) <= 7.5

    def test_source_checks(self):
        with pytest.raises(ValueError):
            render(SceneSpec(0.0), AudioBuffer(np.zeros((2, 1000))))
        with pytest.raises(AssetError):
            render(SceneSpec(0.0, hrir_source="nobody"), source())

    def test_online_noise(self, assets):
        clean = render(SceneSpec(0.0, snr_db=math.inf), source()).clean
        noisy = add_diffuse_noise(clean, "white", 0.0, 5, assets, ArrayGeometry())
        residual = AudioBuffer(noisy.samples - clean.samples)
        assert snr_db(clean, residual) == pytest.approx(0.0)
        assert add_diffuse_noise(clean, "none", 0.0, 5, assets, ArrayGeometry()) is clean


class TestAssets:
    def test_subject_split(self, assets):
        train, val, test = (assets.subjects(s) for s in ("train", "val", "test"))
        assert (len(train), len(val), len(test)) == (8, 1, 1)
        assert not set(train) & set(test)

    def test_missing(self, assets):
        specs = [SceneSpec(0.0, "ghost", "rir-99", "traffic")]
        assert assets.missing(specs) == ["ghost", "rir-99", "traffic"]

    def test_from_directory(self, tmp_path):
        (tmp_path / "rir").mkdir()
        write_wav(tmp_path / "rir" / "hall.wav", AudioBuffer(np.r_[1.0, np.zeros(99)]))
        sub = tmp_path / "hrir" / "kemar"
        sub.mkdir(parents=True)
        for az in (-30, 0, 30):
            left, right = analytic_hrir(az)
            write_wav(sub / f"{az}.wav", AudioBuffer(np.stack([left, right])))
        noise_dir = tmp_path / "noise" / "fan" / "test"
        noise_dir.mkdir(parents=True)
        write_wav(noise_dir / "a.wav", AudioBuffer(0.1 * child_rng(0).standard_normal(8000)))
        a = Assets.from_directory(tmp_path).with_split("test")
        assert "hall" in a.rirs and "kemar" in a.hrir_sets
        np.testing.assert_allclose(a.hrir("kemar", 28.0)[0], analytic_hrir(30)[0], atol=1e-7)
        assert a.missing([SceneSpec(0.0, "kemar", "hall", "fan")]) == []
        render(SceneSpec(0.0, "kemar", "hall", "fan", 0.0), source(), a)


class TestDataset:
    def _manifest(self, tmp_path, n):
        paths = []
        for i in range(n):
            paths.append(write_wav(tmp_path / f"s{i}.wav", source(0.5, i)))
        rng = child_rng("ds")
        return [(p, sample_scene(rng)) for p in paths]

    def test_counts(self, tmp_path):
        out = tmp_path / "out"
        manifest = render_dataset(self._manifest(tmp_path, 3), out)
        assert len(list(out.glob("*.wav"))) == 6
        assert len(list(out.glob("utt_*.json"))) == 3
        entries = read_manifest(manifest)
        assert [e.status for e in entries] == ["ok"] * 3
        meta = json.loads((out / "utt_00001.json").read_text())
        assert meta["doa_label"] == meta["azimuth"] == entries[1].spec.azimuth
        assert SceneSpec.from_dict(json.loads(json.dumps(entries[1].spec.to_dict()))) == \
            entries[1].spec

    def test_empty(self, tmp_path):
        manifest = render_dataset([], tmp_path)
        assert manifest.read_text() == ""

    def test_byte_identical_rerun(self, tmp_path):
        items = self._manifest(tmp_path, 2)

        def digest(d):
            return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                    for p in sorted(d.iterdir())}

        render_dataset(items, tmp_path / "a", jobs=2)
        render_dataset(items, tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_failures_recorded(self, tmp_path):
        items = self._manifest(tmp_path, 1) + [(tmp_path / "missing.wav", SceneSpec(0.0))]
        entries = read_manifest(render_dataset(items, tmp_path / "out"))
        assert [e.status for e in entries] == ["ok", "error"]
        assert "AssetError" in entries[1].error
