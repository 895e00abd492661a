import hashlib

import numpy as np
import pytest
import torch

from latentgen.autoencoder import LossWeights, VAEConfig
from latentgen.datapipe import ToyShapesConfig, gen_toy_dataset
from latentgen.denoiser import UNetConfig
from latentgen.errors import ConfigurationError, TrainingDiverged
from latentgen.harness import (
    SweepResult,
    TrainConfig,
    channel_study,
    eval_generation,
    eval_reconstruction,
    load_pipeline,
    steps_sweep,
    train_phase1,
    train_phase2,
    vae_from_checkpoint,
)
from latentgen.checkpoints import load_checkpoint, save_checkpoint
from latentgen.metrics import PixelFeatures, PRConfig
from latentgen.sampler import SamplerConfig

TOY_VAE = VAEConfig(in_channels=1, latent_channels=4, base_width=16)
TOY_UNET = UNetConfig(latent_channels=4, widths=(16, 32), embed_dim=32)
NO_ADV = LossWeights(lambda_adv=0.0, lambda_perceptual=0.0)


@pytest.fixture(scope="module")
def tiny_data():
    images, labels, _ = gen_toy_dataset(ToyShapesConfig(seed=21), 48)
    return images, labels


@pytest.fixture(scope="module")
def tiny_vae_ckpt(tiny_data):
    cfg = TrainConfig(phase=1, steps=60, batch_size=8, seed=0, loss_weights=NO_ADV)
    return train_phase1(cfg, tiny_data, TOY_VAE)


@pytest.fixture(scope="module")
def tiny_diffusion_ckpt(tiny_data, tiny_vae_ckpt):
    cfg = TrainConfig(phase=2, steps=60, batch_size=8, seed=0, vae_checkpoint="<mem>",
                      T=100, beta_end=0.05)
    return train_phase2(cfg, tiny_vae_ckpt, tiny_data, TOY_UNET)


# ---------------------------------------------------------------------------
# config


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(phase=3)
    with pytest.raises(ConfigurationError):
        TrainConfig(phase=1, steps=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(phase=1, lr=-1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(phase=2)  # must reference a phase-1 checkpoint
    with pytest.raises(ConfigurationError):
        TrainConfig(phase=2, vae_checkpoint="x", ema_decay=1.5)
    assert TrainConfig(phase=1).effective_lr == 1e-4
    assert TrainConfig(phase=2, vae_checkpoint="x").effective_lr == 2e-4


# ---------------------------------------------------------------------------
# phase 1


def test_phase1_smoke_loss_decreases(tiny_data):
    cfg = TrainConfig(phase=1, steps=200, batch_size=8, seed=1, loss_weights=NO_ADV)
    ckpt = train_phase1(cfg, tiny_data, TOY_VAE)
    recon = ckpt.arrays["history/recon"]
    assert recon.shape == (200,)
    assert recon[-50:].mean() < recon[:50].mean()


def test_phase1_seeded_determinism(tiny_data):
    cfg = TrainConfig(phase=1, steps=25, batch_size=8, seed=2, loss_weights=NO_ADV)
    a = train_phase1(cfg, tiny_data, TOY_VAE)
    b = train_phase1(cfg, tiny_data, TOY_VAE)
    for name in a.arrays:
        assert np.array_equal(a.arrays[name], b.arrays[name], equal_nan=True), name


def test_phase1_no_adv_leaves_discriminator_untouched(tiny_data):
    cfg = TrainConfig(phase=1, steps=10, batch_size=8, seed=3, loss_weights=NO_ADV)
    ckpt = train_phase1(cfg, tiny_data, TOY_VAE)
    assert not [k for k in ckpt.arrays if k.startswith("disc/")]
    assert np.isnan(ckpt.arrays["history/d_loss"]).all()


def test_phase1_adversarial_updates_after_warmup(tiny_data):
    cfg = TrainConfig(
        phase=1, steps=30, batch_size=8, seed=4, disc_warmup=20,
        disc_width=16, disc_depth=2,
        loss_weights=LossWeights(lambda_adv=0.1, lambda_perceptual=0.0),
    )
    ckpt = train_phase1(cfg, tiny_data, TOY_VAE)
    d_hist = ckpt.arrays["history/d_loss"]
    assert np.isnan(d_hist[:20]).all()
    assert np.isfinite(d_hist[20:]).all()
    assert [k for k in ckpt.arrays if k.startswith("disc/")]


def test_phase1_divergence_aborts(tiny_data, tmp_path):
    cfg = TrainConfig(phase=1, steps=50, batch_size=8, seed=5, lr=1e10,
                      loss_weights=NO_ADV)
    with pytest.raises(TrainingDiverged):
        train_phase1(cfg, tiny_data, TOY_VAE, out_dir=tmp_path)
    assert (tmp_path / "diverged.json").exists()
    assert (tmp_path / "diverged.ckpt").exists()


def test_phase1_writes_outputs(tiny_data, tmp_path):
    cfg = TrainConfig(phase=1, steps=8, batch_size=8, seed=6, loss_weights=NO_ADV,
                      checkpoint_interval=5)
    train_phase1(cfg, tiny_data, TOY_VAE, out_dir=tmp_path)
    assert (tmp_path / "vae.ckpt").exists()
    assert (tmp_path / "vae-0000005.ckpt").exists()
    header = (tmp_path / "phase1_history.csv").read_text().splitlines()[0]
    assert header == "step,recon,kl,d_loss"


# ---------------------------------------------------------------------------
# phase 2


def test_phase2_freezes_vae(tiny_data, tiny_vae_ckpt, tiny_diffusion_ckpt):
    for key, arr in tiny_vae_ckpt.arrays.items():
        if key.startswith("vae/"):
            before = hashlib.sha256(arr.tobytes()).hexdigest()
            after = hashlib.sha256(tiny_diffusion_ckpt.arrays[key].tobytes()).hexdigest()
            assert before == after, key


def test_phase2_initial_loss_near_one_and_decreasing(tiny_data, tiny_vae_ckpt):
    cfg = TrainConfig(phase=2, steps=200, batch_size=8, seed=7, vae_checkpoint="<mem>",
                      T=100, beta_end=0.05)
    ckpt = train_phase2(cfg, tiny_vae_ckpt, tiny_data, TOY_UNET)
    hist = ckpt.arrays["history/diffusion"]
    assert hist[:10].mean() == pytest.approx(1.0, abs=0.15)
    assert hist[-50:].mean() < hist[:50].mean()


def test_phase2_seeded_determinism(tiny_data, tiny_vae_ckpt):
    cfg = TrainConfig(phase=2, steps=20, batch_size=8, seed=8, vae_checkpoint="<mem>",
                      T=100, beta_end=0.05)
    a = train_phase2(cfg, tiny_vae_ckpt, tiny_data, TOY_UNET)
    b = train_phase2(cfg, tiny_vae_ckpt, tiny_data, TOY_UNET)
    for name in a.arrays:
        assert np.array_equal(a.arrays[name], b.arrays[name]), name


def test_phase2_ema_arrays_present(tiny_data, tiny_vae_ckpt):
    cfg = TrainConfig(phase=2, steps=10, batch_size=8, seed=9, vae_checkpoint="<mem>",
                      ema_decay=0.99, T=100, beta_end=0.05)
    ckpt = train_phase2(cfg, tiny_vae_ckpt, tiny_data, TOY_UNET)
    ema = [k for k in ckpt.arrays if k.startswith("ema/")]
    unet = [k for k in ckpt.arrays if k.startswith("unet/")]
    assert len(ema) == len(unet)


# ---------------------------------------------------------------------------
# pipeline and checkpoint persistence


def test_pipeline_roundtrip_through_disk(tiny_diffusion_ckpt, tmp_path):
    path = tmp_path / "d.ckpt"
    save_checkpoint(tiny_diffusion_ckpt, path)
    pipe = load_pipeline(path)
    imgs = pipe.generate(1, 2, steps=4, seed=0)
    assert tuple(imgs.shape) == (2, 1, 32, 32)
    again = load_pipeline(path).generate(1, 2, steps=4, seed=0)
    assert torch.equal(imgs, again)


def test_pipeline_rejects_phase1_checkpoint(tiny_vae_ckpt):
    from latentgen.errors import ContractError

    with pytest.raises(ContractError):
        load_pipeline(tiny_vae_ckpt)


def test_checkpoint_reload_reproduces_vae_outputs(tiny_vae_ckpt, tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(tiny_vae_ckpt, path)
    vae_a = vae_from_checkpoint(tiny_vae_ckpt)
    vae_b = vae_from_checkpoint(load_checkpoint(path))
    probe = torch.rand(1, 1, 32, 32) * 2 - 1
    with torch.no_grad():
        assert torch.equal(vae_a.encode(probe).mu, vae_b.encode(probe).mu)


# ---------------------------------------------------------------------------
# evaluation runners (stub models keep these fast)


class _IdentityVAE:
    class _Enc:
        def __init__(self, x):
            self.mu = x
            self.skips = None

    def encode(self, x):
        return self._Enc(x)

    def decode(self, z, skips=None):
        return z, torch.nn.functional.avg_pool2d(z, 2)


def test_eval_reconstruction_identity_stub(tiny_data):
    images, _ = tiny_data
    report = eval_reconstruction(_IdentityVAE(), images[:16])
    assert report["ms_ssim_mean"] == pytest.approx(1.0, abs=1e-6)
    assert report["ms_ssim_std"] == pytest.approx(0.0, abs=1e-6)
    assert report["mse_1e5_mean"] == 0.0


class _PassthroughPipeline:
    """Returns real images of the requested class; a perfect 'generator'."""

    num_classes = 2

    def __init__(self, images, labels):
        self.images = images
        self.labels = labels

    def generate(self, label, n, steps=150, eta=0.0, seed=0):
        pool = self.images[self.labels == label]
        return pool[:n]


class _NoisePipeline:
    num_classes = 2

    def generate(self, label, n, steps=150, eta=0.0, seed=0):
        gen = torch.Generator().manual_seed(seed + label)
        return torch.rand(n, 1, 32, 32, generator=gen) * 2 - 1


def test_eval_generation_passthrough_is_perfect(tiny_data):
    images, labels = tiny_data
    pipe = _PassthroughPipeline(images, labels)
    report = eval_generation(pipe, images, labels, PixelFeatures(),
                             SamplerConfig(steps=4, seed=0), PRConfig(k=3), "ref")
    assert report.fid <= 1e-6
    assert report.precision == 1.0 and report.recall == 1.0


def test_eval_generation_noise_scores_far_worse(tiny_data):
    images, labels = tiny_data
    extractor = PixelFeatures()
    perfect = eval_generation(_PassthroughPipeline(images, labels), images, labels,
                              extractor, SamplerConfig(steps=4), PRConfig(k=3))
    noisy = eval_generation(_NoisePipeline(), images, labels, extractor,
                            SamplerConfig(steps=4), PRConfig(k=3))
    assert noisy.fid > 100 * max(perfect.fid, 1e-9)


def test_steps_sweep_row_structure(tiny_data, tmp_path):
    images, labels = tiny_data
    pipe = _PassthroughPipeline(images, labels)
    result = steps_sweep(pipe, [50, 100, 150, 200, 250], [0, 1], images, labels,
                         PixelFeatures(), out_dir=tmp_path)
    assert len(result.rows) == 10  # 5 settings x 2 seeds
    csv_lines = result.csv_path.read_text().splitlines()
    assert csv_lines[0] == "setting,seed,fid,precision,recall"
    assert len(csv_lines) == 11
    assert result.plot_path.exists() and result.plot_path.suffix == ".svg"


def test_steps_sweep_degenerate_single_setting(tiny_data):
    images, labels = tiny_data
    result = steps_sweep(_PassthroughPipeline(images, labels), [150], [0],
                         images, labels, PixelFeatures())
    assert len(result.rows) == 1


def test_sweep_median():
    rows = [{"setting": 50, "seed": s, "fid": f, "precision": 1, "recall": 1}
            for s, f in ((0, 3.0), (1, 1.0), (2, 2.0))]
    assert SweepResult(rows=rows).median_fid(50) == 2.0


def test_channel_study_rows(tiny_data, tmp_path):
    cfg4 = VAEConfig(in_channels=1, latent_channels=4, base_width=16)
    cfg8 = VAEConfig(in_channels=1, latent_channels=8, base_width=16)
    train_cfg = TrainConfig(phase=1, steps=20, batch_size=8, seed=10,
                            loss_weights=NO_ADV)
    rows = channel_study(tiny_data, cfg4, cfg8, train_cfg, out_dir=tmp_path,
                         eval_images=tiny_data[0][:16])
    assert len(rows) == 2
    assert rows[0]["steps"] == rows[1]["steps"] == 20
    assert rows[0]["latent_channels"] == 4 and rows[1]["latent_channels"] == 8
    assert rows[0]["data_reduction"] == 16.0 and rows[1]["data_reduction"] == 8.0
    assert (tmp_path / "channel_study.csv").exists()


def test_channel_study_rejects_equal_channels(tiny_data):
    cfg = VAEConfig(in_channels=1, latent_channels=4, base_width=16)
    with pytest.raises(ConfigurationError):
        channel_study(tiny_data, cfg, cfg, TrainConfig(phase=1, steps=1))
