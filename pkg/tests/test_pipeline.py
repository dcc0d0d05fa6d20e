import json
import shutil

import numpy as np
import pytest

from p2mx import autodiff as ad
from p2mx import cli
from p2mx import mesh as M
from p2mx import model as mdl
from p2mx import pipeline as P
from p2mx import synth as S
from p2mx.config import RunConfig, parse_config, write_config
from p2mx.data import list_scenes, load_scene, prepare_views, split_scenes
from p2mx.errors import ConfigError, DatasetError, TrainingDivergedError
from p2mx.losses import MetricConfig, f_score, resample_mesh
from p2mx.pooling import save_fmap
from p2mx.train import read_loss_csv, train

SPEC = {"scenes": 2, "families": ["box", "ellipsoid"], "views": 3,
        "image_size": 32, "ring_radius": 2.6, "cloud_samples": 600}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SPEC))
    S.synth_dataset(spec, root / "scenes", seed=5)
    return root / "scenes"


def micro_run_config(dataset_root, tmp_path, **over):
    values = dict(seed=11, epochs_phase1=1, epochs_phase2=1, lr_phase1=1e-3,
                  lr_phase2=1e-3, views_per_step=2, backbone_channels=(4, 6, 8),
                  scoring_width=12, coarse_width=12, coarse_level=1, coarse_radius=0.5,
                  iterations=1, resample_count=300, dataset_root=str(dataset_root),
                  checkpoint_out=str(tmp_path / "m.ckpt"),
                  loss_csv=str(tmp_path / "loss.csv"))
    values.update(over)
    return RunConfig(**values)


# --- synthesis ----------------------------------------------------------------

def test_synth_writes_complete_scene_dirs(dataset):
    dirs = sorted(p.name for p in dataset.iterdir())
    assert dirs == ["scene000_box", "scene001_ellipsoid"]
    for d in dataset.iterdir():
        names = {p.name for p in d.iterdir()}
        assert {"gt.obj", "gt_cloud.xyz", "cameras.json", "category.txt",
                "view00.pgm", "view01.pgm", "view02.pgm"} <= names


def test_synth_deterministic_bytes(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({**SPEC, "scenes": 1}))
    S.synth_dataset(spec, tmp_path / "a", seed=9)
    S.synth_dataset(spec, tmp_path / "b", seed=9)
    for fa in sorted((tmp_path / "a" / "scene000_box").iterdir()):
        fb = tmp_path / "b" / "scene000_box" / fa.name
        assert fa.read_bytes() == fb.read_bytes(), fa.name


def test_synth_rejects_offscreen_geometry(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({**SPEC, "scenes": 1, "ring_radius": 0.9}))
    with pytest.raises(DatasetError):
        S.synth_dataset(spec, tmp_path / "x", seed=0)


def test_synth_spec_rejects_unknown_keys(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({**SPEC, "bogus": 1}))
    with pytest.raises(DatasetError):
        S.load_synth_spec(spec)


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(16, 24)).astype(np.uint8)
    S.write_pgm(tmp_path / "x.pgm", img)
    back = S.read_pgm(tmp_path / "x.pgm")
    assert back.shape == (1, 16, 24)
    assert np.array_equal((back[0] * 255).round().astype(np.uint8), img)


def test_cloud_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.uniform(size=(50, 3))
    nrm = rng.uniform(size=(50, 3))
    S.write_cloud(tmp_path / "c.xyz", pts, nrm)
    p2, n2 = S.read_cloud(tmp_path / "c.xyz")
    assert np.allclose(p2, pts, atol=1e-8)
    assert np.allclose(n2, nrm, atol=1e-8)


# --- config --------------------------------------------------------------------

def test_config_roundtrip(tmp_path):
    cfg = RunConfig(seed=3, backbone_channels=(4, 6, 8), hypothesis_scale=(0.02, 0.01),
                    train_scenes=("a", "b"), dataset_root="/tmp/x")
    path = tmp_path / "run.cfg"
    write_config(path, cfg)
    assert parse_config(path) == cfg


def test_config_unknown_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("seed = 1\nnot_a_key = 2\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(p)
    assert "not_a_key" in str(exc.value)


def test_config_duplicate_and_invalid(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError):
        parse_config(p)
    p.write_text("lr_phase1 = fast\n")
    with pytest.raises(ConfigError):
        parse_config(p)
    p.write_text("views_per_step = 0\n")
    with pytest.raises(ConfigError):
        parse_config(p)


def test_config_comments_and_blanks(tmp_path):
    p = tmp_path / "ok.cfg"
    p.write_text("# comment\n\nseed = 4   # trailing\nscoring_width = 32\n")
    cfg = parse_config(p)
    assert cfg.seed == 4 and cfg.scoring_width == 32


def test_epoch_scale_shrinks_schedule(dataset, tmp_path):
    cfg = micro_run_config(dataset, tmp_path, epochs_phase1=4, epochs_phase2=2,
                           epoch_scale=0.5)
    _, rows = train(cfg)
    # (round(4*0.5) + round(2*0.5)) * 2 scenes = 6 steps
    assert len(rows) == 6


# --- scenes and splits -----------------------------------------------------------

def test_scene_loading(dataset):
    scene = load_scene(dataset / "scene000_box")
    assert scene.category == "box"
    assert scene.n_views == 3
    assert scene.gt_points.shape == scene.gt_normals.shape
    assert len(scene.cameras) == 3


def test_scene_missing_inputs(tmp_path):
    d = tmp_path / "scene"
    d.mkdir()
    with pytest.raises(DatasetError):
        load_scene(d)


def test_split_disjointness(dataset):
    scenes = list_scenes(dataset)
    with pytest.raises(DatasetError):
        split_scenes(scenes, ("scene000_box",), ("scene000_box",))
    train_s, test_s = split_scenes(scenes, (), ("scene001_ellipsoid",))
    assert [s.scene_id for s in train_s] == ["scene000_box"]
    with pytest.raises(DatasetError):
        split_scenes(scenes, ("nope",), ())


def test_fmap_scene_input(dataset, tmp_path):
    # precomputed-pyramid views are consumed exactly like image views
    src = dataset / "scene000_box"
    dst = tmp_path / "scene000_box"
    shutil.copytree(src, dst)
    cfg = mdl.ModelConfig(in_channels=1, backbone_channels=(4, 6, 8), scoring_width=12,
                          coarse_width=12, coarse_level=0, coarse_radius=0.5, seed=0)
    model = mdl.DeformationModel(cfg)
    rng = np.random.default_rng(2)
    for vi in range(3):
        size = SPEC["image_size"]
        pyramid = [rng.uniform(size=(c, size // s, size // s)).astype(np.float32)
                   for c, s in zip((4, 6, 8), (1, 2, 4))]
        save_fmap(dst / f"view{vi:02d}.fmap", pyramid)
        (dst / f"view{vi:02d}.pgm").unlink()
    scene = load_scene(dst)
    assert all(p.suffix == ".fmap" for p in scene.view_files)
    views = prepare_views(scene, model, [0, 1, 2])
    out = mdl.coarse_generate(views, model)
    assert out.n_vertices == 162  # level-0 start: 12 -> 42 -> 162


# --- training --------------------------------------------------------------------

def test_train_loss_csv_rows(dataset, tmp_path):
    cfg = micro_run_config(dataset, tmp_path, epochs_phase1=1, epochs_phase2=1)
    ckpt, rows = train(cfg)
    # 2 scenes, 1 epoch per phase -> 4 steps
    assert len(rows) == 4
    csv_rows = read_loss_csv(cfg.loss_csv)
    assert len(csv_rows) == 4
    assert [r[0] for r in csv_rows] == [0, 1, 2, 3]
    model, extras = mdl.load_model(ckpt)
    assert "train/step" in extras and int(extras["train/step"][0]) == 4


def test_train_resume_bitwise(dataset, tmp_path):
    full = micro_run_config(dataset, tmp_path, epochs_phase1=1, epochs_phase2=2,
                            train_scenes=("scene000_box",),
                            checkpoint_out=str(tmp_path / "full.ckpt"),
                            loss_csv=str(tmp_path / "full.csv"))
    _, full_rows = train(full)
    assert len(full_rows) == 3

    part = micro_run_config(dataset, tmp_path, epochs_phase1=1, epochs_phase2=1,
                            train_scenes=("scene000_box",),
                            checkpoint_out=str(tmp_path / "part.ckpt"),
                            loss_csv=str(tmp_path / "part.csv"))
    train(part)

    resumed = micro_run_config(dataset, tmp_path, epochs_phase1=1, epochs_phase2=2,
                               train_scenes=("scene000_box",),
                               resume=str(tmp_path / "part.ckpt"),
                               checkpoint_out=str(tmp_path / "res.ckpt"),
                               loss_csv=str(tmp_path / "res.csv"))
    _, res_rows = train(resumed)
    assert len(res_rows) == 1
    assert res_rows[0][0] == 2
    assert res_rows[0][1] == full_rows[2][1]  # bitwise-equal loss
    assert res_rows[0][2] == full_rows[2][2]


def test_train_phase1_updates_only_coarse_params(dataset, tmp_path):
    from p2mx.train import model_config_from_run

    cfg = micro_run_config(dataset, tmp_path, epochs_phase1=1, epochs_phase2=0)
    before = mdl.DeformationModel(model_config_from_run(cfg)).store.state_dict()
    ckpt, _ = train(cfg)
    after = mdl.load_model(ckpt)[0].store.state_dict()
    coarse_changed = any(not np.array_equal(before[n], after[n])
                         for n in before if n.startswith("coarse/"))
    others_frozen = all(np.array_equal(before[n], after[n])
                        for n in before if not n.startswith("coarse/"))
    assert coarse_changed and others_frozen


def test_train_same_seed_identical_checkpoints(dataset, tmp_path):
    cfg_a = micro_run_config(dataset, tmp_path, checkpoint_out=str(tmp_path / "a.ckpt"),
                             loss_csv=str(tmp_path / "a.csv"))
    cfg_b = micro_run_config(dataset, tmp_path, checkpoint_out=str(tmp_path / "b.ckpt"),
                             loss_csv=str(tmp_path / "b.csv"))
    train(cfg_a)
    train(cfg_b)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_aborts_with_diagnostic(dataset, tmp_path):
    cfg = micro_run_config(dataset, tmp_path, lr_phase1=1e18, lr_phase2=1e18,
                           epochs_phase1=3, epochs_phase2=0)
    with pytest.raises(TrainingDivergedError) as exc:
        train(cfg)
    assert "non-finite" in str(exc.value)


# --- evaluation and refinement ------------------------------------------------------

@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = micro_run_config(dataset, tmp, epochs_phase1=2, epochs_phase2=2)
    ckpt, _ = train(cfg)
    return ckpt


def test_evaluate_report_rows(dataset, trained, tmp_path):
    scenes = list_scenes(dataset)
    report = tmp_path / "report.json"
    rows = P.evaluate_cmd(trained, scenes, MetricConfig(tau=1e-3, samples=500),
                          mdl.RefineConfig(iterations=1), report)
    assert len(rows) == len(scenes) + 1
    assert rows[-1]["scene_id"] == "mean"
    on_disk = json.loads(report.read_text())
    assert len(on_disk) == len(rows)
    for key in ("cd", "f_tau", "f_2tau", "precision", "recall", "n_pred", "n_gt"):
        assert key in on_disk[0]


def test_evaluate_reports_deterministic(dataset, trained, tmp_path):
    scenes = list_scenes(dataset)
    for name in ("r1.json", "rr1.json"):
        P.evaluate_cmd(trained, scenes, MetricConfig(tau=1e-3, samples=300),
                       mdl.RefineConfig(iterations=1), tmp_path / name)
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "rr1.json").read_bytes()


def test_evaluate_views_sweep_without_retraining(dataset, trained, tmp_path):
    scenes = list_scenes(dataset)
    r2 = P.evaluate_cmd(trained, scenes, MetricConfig(tau=1e-3, samples=300),
                        mdl.RefineConfig(iterations=1), tmp_path / "r2.json", views_k=2)
    r3 = P.evaluate_cmd(trained, scenes, MetricConfig(tau=1e-3, samples=300),
                        mdl.RefineConfig(iterations=1), tmp_path / "r3.json", views_k=3)
    assert len(r2) == len(r3) == len(scenes) + 1


def test_self_evaluation_fscore(dataset):
    # two independent samplings of the gt surface at a density-consistent tau
    scene = load_scene(dataset / "scene000_box")
    mesh = M.load_obj(scene.mesh_path)
    pred = resample_mesh(mesh, 10_000, np.random.default_rng(3))
    area = 6.0  # generous area bound for these shapes
    tau = 9.0 * area / len(scene.gt_points)
    f_tau, _, _, _ = f_score(pred, scene.gt_points, tau)
    assert f_tau >= 99.0


def test_refine_zero_weights_checkpoint_identity(dataset, tmp_path):
    cfg = mdl.ModelConfig(in_channels=1, backbone_channels=(4, 6, 8), scoring_width=12,
                          coarse_width=12, coarse_level=1, coarse_radius=0.5, seed=1)
    model = mdl.DeformationModel(cfg)
    model.store.zero_()
    ckpt = tmp_path / "zero.ckpt"
    mdl.save_model(ckpt, model)
    mesh_path = dataset / "scene000_box" / "gt.obj"
    out = tmp_path / "out.obj"
    P.refine_cmd(mesh_path, dataset / "scene000_box", ckpt, 3, out, print_fn=lambda *_: None)
    a = M.load_obj(mesh_path)
    b = M.load_obj(out)
    assert np.abs(a.vertices - b.vertices).max() < 1e-6
    assert np.array_equal(a.faces, b.faces)


def test_refine_zero_iterations_passthrough(dataset, tmp_path):
    mesh_path = dataset / "scene000_box" / "gt.obj"
    out = tmp_path / "copy.obj"
    P.refine_cmd(mesh_path, dataset / "scene000_box", "unused.ckpt", 0, out)
    assert out.read_bytes() == mesh_path.read_bytes()


# --- CLI ---------------------------------------------------------------------------

def test_cli_synth_and_exit_codes(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({**SPEC, "scenes": 1}))
    assert cli.main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d"), "--seed", "1"]) == 0
    assert (tmp_path / "d" / "scene000_box" / "gt.obj").exists()


def test_cli_error_is_machine_parsable(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("wrong_key = 1\n")
    code = cli.main(["train", "--config", str(bad)])
    assert code != 0
    err = capsys.readouterr().err
    assert err.startswith("P2MX-ERR-CONFIG:")
    assert "\n" not in err.strip()


def test_cli_missing_file_error(tmp_path, capsys):
    code = cli.main(["train", "--config", str(tmp_path / "nope.cfg")])
    assert code != 0
    assert capsys.readouterr().err.startswith("P2MX-ERR-IO:")


def test_cli_train_eval_refine(dataset, tmp_path, capsys):
    cfg = micro_run_config(dataset, tmp_path, epochs_phase1=1, epochs_phase2=1)
    cfg_path = tmp_path / "run.cfg"
    write_config(cfg_path, cfg)
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    assert cli.main(["eval", "--ckpt", cfg.checkpoint_out, "--data", str(dataset),
                     "--tau", "1e-3", "--samples", "300", "--iters", "1",
                     "--report", str(tmp_path / "rep.json")]) == 0
    assert cli.main(["refine", "--mesh", str(dataset / "scene000_box" / "gt.obj"),
                     "--scene", str(dataset / "scene000_box"), "--ckpt", cfg.checkpoint_out,
                     "--iters", "1", "--out", str(tmp_path / "r.obj")]) == 0
    assert (tmp_path / "r.obj").exists()
    capsys.readouterr()
