"""Training driver, evaluation and reporting.

Stage 1 trains the alignment objective on cached unit sequences; stage
2 trains the hybrid recognition loss, optionally initialized from a
stage-1 checkpoint.  Evaluation decodes a split, scores word error
rate overall and per condition bin, and writes one machine-readable
JSON report plus one aligned text table.  All randomness flows from
the run seed; identical configs reproduce loss curves bit-exactly.
"""

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus, tensor as T, units as units_mod
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import RunConfig
from .errors import ConfigError
from .model import Stage1Model, Stage2Model, transfer_stage1
from .optim import AdamW, clip_grad_norm, warmup_cosine_lr
from .tensorio import write_heatmap

FACTORS = (("illumination", "BMD"), ("occlusion", "NY"),
           ("blur", "CMB"), ("pose", "SML"))


def wer(ref_tokens, hyp_tokens):
    """Word error rate: edit distance over the reference length."""
    ref, hyp = list(ref_tokens), list(hyp_tokens)
    if not ref:
        raise ConfigError("WER needs a nonempty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


# ----------------------- dataset plumbing -----------------------

def build_units(data_dir, codebook_size=64, seed=0):
    """Build the codebook from training audio and cache unit codes for
    every clip (units.tsv + codebook.vscb next to the manifest)."""
    data_dir = Path(data_dir)
    rows = corpus.load_manifest(data_dir)
    train_audio = [corpus.load_clip(data_dir, r).audio_feats
                   for r in rows if r.split == "train"]
    codebook = units_mod.build_codebook(np.vstack(train_audio),
                                        size=codebook_size, seed=seed)
    units_mod.save_codebook(data_dir / "codebook.vscb", codebook)
    with open(data_dir / "units.tsv", "w") as f:
        for row in rows:
            clip = corpus.load_clip(data_dir, row)
            seq = units_mod.quantize(clip.audio_feats, codebook,
                                     num_frames=clip.frames.shape[0])
            codes = " ".join(str(c) for c in seq.codes)
            f.write(f"{row.clip_id}\t{codes}\n")
    return data_dir / "units.tsv"


def load_units(data_dir):
    path = Path(data_dir) / "units.tsv"
    if not path.is_file():
        raise ConfigError(f"unit cache missing: {path} (run the units step)")
    out = {}
    with open(path) as f:
        for line in f:
            cid, codes = line.rstrip("\n").split("\t")
            out[cid] = np.array([int(c) for c in codes.split()],
                                dtype=np.int64)
    return out


class ClipStore:
    """In-memory frame cache keyed by clip id."""

    def __init__(self, data_dir, rows):
        self.data_dir = data_dir
        self.rows = {r.clip_id: r for r in rows}
        self._frames = {}

    def frames(self, clip_id):
        if clip_id not in self._frames:
            row = self.rows[clip_id]
            self._frames[clip_id] = corpus.load_clip(self.data_dir, row).frames
        return self._frames[clip_id]


def _train_rows(cfg):
    rows = corpus.load_manifest(cfg.data_dir)
    train = [r for r in rows if r.split == "train"]
    if not train:
        raise ConfigError(f"no training clips in {cfg.data_dir}")
    return train


def _mean_loss(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms))


def _log_path(out_dir, stage):
    return Path(out_dir) / f"stage{stage}_losses.tsv"


# ----------------------- training loops -----------------------

def train_stage1(cfg):
    """Train the alignment stage; returns the checkpoint path."""
    cfg.validate()
    train = _train_rows(cfg)
    units = load_units(cfg.data_dir)
    store = ClipStore(cfg.data_dir, train)
    model = Stage1Model(cfg)
    named = model.named_parameters()
    params = [named[k] for k in sorted(named)]
    opt = AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x51A])

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_lines = []
    start = time.time()
    for step in range(cfg.steps):
        picks = rng.choice(len(train), size=min(cfg.batch_size, len(train)),
                           replace=False)
        batch_frames, batch_codes = [], []
        for idx in picks:
            row = train[int(idx)]
            frames = store.frames(row.clip_id)
            if cfg.augment:
                frames = corpus.augment(frames, rng)
            batch_frames.append(frames)
            batch_codes.append(units[row.clip_id])
        results = model.batch_losses(batch_frames, batch_codes)
        totals = [r[0] for r in results]
        globals_ = [r[1] for r in results]
        locals_ = [r[2] for r in results if r[2] is not None]
        loss = _mean_loss(totals)
        T.backward(loss)
        clip_grad_norm(params, cfg.clip_norm)
        opt.step(lr=warmup_cosine_lr(step, cfg.steps, cfg.lr,
                                     cfg.warmup_frac))
        opt.zero_grad()
        gmean = float(np.mean([t.item() for t in globals_]))
        lmean = float(np.mean([t.item() for t in locals_])) if locals_ else 0.0
        log_lines.append(f"{step}\t{loss.item():.10f}\t{gmean:.10f}"
                         f"\t{lmean:.10f}")
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"[stage1 seed={cfg.seed}] step {step} "
                  f"loss {loss.item():.4f} ({time.time() - start:.1f}s)")
    _log_path(out, 1).write_text("step\ttotal\tglobal\tlocal\n"
                                 + "\n".join(log_lines)
                                 + ("\n" if log_lines else ""))
    ckpt = out / "stage1.vsck"
    save_checkpoint(ckpt, model.state())
    return ckpt


def train_stage2(cfg):
    """Train the recognition stage; returns the checkpoint path."""
    cfg.validate()
    train = _train_rows(cfg)
    store = ClipStore(cfg.data_dir, train)
    model = Stage2Model(cfg)
    if cfg.init == "stage1_checkpoint":
        transfer_stage1(model, load_checkpoint(cfg.init_checkpoint),
                        load_alignment_encoder=cfg.load_alignment_encoder)
    named = model.named_parameters()
    params = [named[k] for k in sorted(named)]
    opt = AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x52A])

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_lines = []
    start = time.time()
    for step in range(cfg.steps):
        picks = rng.choice(len(train), size=min(cfg.batch_size, len(train)),
                           replace=False)
        batch_frames, batch_texts = [], []
        for idx in picks:
            row = train[int(idx)]
            frames = store.frames(row.clip_id)
            if cfg.augment:
                frames = corpus.augment(frames, rng)
            batch_frames.append(frames)
            batch_texts.append(row.transcript)
        results = model.batch_losses(batch_frames, batch_texts)
        totals = [r[0] for r in results]
        ctcs = [r[1].item() for r in results]
        ces = [r[2].item() for r in results]
        loss = _mean_loss(totals)
        T.backward(loss)
        clip_grad_norm(params, cfg.clip_norm)
        opt.step(lr=warmup_cosine_lr(step, cfg.steps, cfg.lr,
                                     cfg.warmup_frac))
        opt.zero_grad()
        log_lines.append(f"{step}\t{loss.item():.10f}"
                         f"\t{float(np.mean(ctcs)):.10f}"
                         f"\t{float(np.mean(ces)):.10f}")
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"[stage2 seed={cfg.seed} {cfg.fusion}] step {step} "
                  f"loss {loss.item():.4f} ({time.time() - start:.1f}s)")
    _log_path(out, 2).write_text("step\ttotal\tctc\tce\n"
                                 + "\n".join(log_lines)
                                 + ("\n" if log_lines else ""))
    ckpt = out / "stage2.vsck"
    save_checkpoint(ckpt, model.state())
    return ckpt


# ----------------------- evaluation -----------------------

@dataclass
class EvalReport:
    overall_wer: float
    num_clips: int
    factors: dict   # factor -> level -> {"count": int, "wer": float}
    clips: list     # per-clip records


def evaluate(cfg, checkpoint_path, decode_fn=None, write=True):
    """Decode the configured split and build the condition report.

    ``decode_fn(model, frames) -> Hypothesis`` may be injected (tests,
    oracle hypotheses); the default decodes per the config.
    """
    cfg.validate()
    rows = [r for r in corpus.load_manifest(cfg.data_dir)
            if r.split == cfg.eval_split]
    if not rows:
        raise ConfigError(f"no clips in split {cfg.eval_split!r}")
    rows.sort(key=lambda r: r.clip_id)
    model = Stage2Model(cfg)
    load_into(model, load_checkpoint(checkpoint_path))
    store = ClipStore(cfg.data_dir, rows)

    if decode_fn is None:
        def decode_fn(m, frames):
            return m.decode(frames, mode=cfg.decode_mode,
                            beam_width=cfg.beam_width, lam_dec=cfg.lam_dec)

    records = []
    for row in rows:
        hyp = decode_fn(model, store.frames(row.clip_id))
        rate = wer(row.transcript.split(), hyp.text.split())
        records.append({
            "clip_id": row.clip_id,
            "reference": row.transcript,
            "hypothesis": hyp.text,
            "wer": rate,
            "ctc_score": hyp.ctc_score,
            "attn_score": hyp.attn_score,
            "joint_score": hyp.score,
            "condition": {f: getattr(row.condition, f) for f, _ in FACTORS},
        })

    factors = {}
    for factor, levels in FACTORS:
        table = {}
        for level in levels:
            sub = [r["wer"] for r in records
                   if r["condition"][factor] == level]
            if sub:  # an empty bin is absent, not zero
                table[level] = {"count": len(sub),
                                "wer": float(np.mean(sub))}
        factors[factor] = table
    report = EvalReport(
        overall_wer=float(np.mean([r["wer"] for r in records])),
        num_clips=len(records), factors=factors, clips=records)
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out, report)
    return report


def write_report(out_dir, report):
    out = Path(out_dir)
    machine = {"overall_wer": report.overall_wer,
               "num_clips": report.num_clips, "factors": report.factors}
    (out / "report.json").write_text(json.dumps(machine, indent=2) + "\n")
    (out / "report.txt").write_text(format_condition_table(report))
    with open(out / "hypotheses.jsonl", "w") as f:
        for rec in report.clips:
            f.write(json.dumps({k: rec[k] for k in
                                ("clip_id", "reference", "hypothesis",
                                 "ctc_score", "attn_score", "joint_score")})
                    + "\n")


def format_condition_table(report):
    """Aligned text table: overall plus the 11 condition columns."""
    header1, header2, values = [], [], []
    for factor, levels in FACTORS:
        present = [lvl for lvl in levels]
        header1.append(factor.capitalize().center(7 * len(present) - 1))
        for lvl in present:
            header2.append(f"{lvl:>6}")
            cell = report.factors[factor].get(lvl)
            values.append(f"{cell['wer']:6.3f}" if cell else f"{'-':>6}")
    lines = [
        f"overall WER {report.overall_wer:.4f} over {report.num_clips} clips",
        " | ".join(header1),
        " ".join(header2),
        " ".join(values),
    ]
    counts = []
    for factor, levels in FACTORS:
        for lvl in levels:
            cell = report.factors[factor].get(lvl)
            counts.append(f"{cell['count'] if cell else 0:>6}")
    lines.append(" ".join(counts) + "   (clips per bin)")
    return "\n".join(lines) + "\n"


def partition_consistency_gap(report):
    """Largest deviation between the overall WER and the clip-weighted
    mean of per-bin WERs, across factors."""
    worst = 0.0
    for factor, _ in FACTORS:
        bins = report.factors[factor].values()
        total = sum(b["count"] for b in bins)
        if total == 0:
            continue
        weighted = sum(b["count"] * b["wer"] for b in bins) / total
        worst = max(worst, abs(weighted - report.overall_wer))
    return worst


# ----------------------- heatmaps -----------------------

def export_heatmaps(cfg, checkpoint_path, clip_ids, out_dir, plot=False):
    """Write attention maps for the given clips as binary+header pairs;
    optionally render one PNG grid per clip (time by region)."""
    model = Stage2Model(cfg)
    load_into(model, load_checkpoint(checkpoint_path))
    rows = {r.clip_id: r for r in corpus.load_manifest(cfg.data_dir)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cid in clip_ids:
        if cid not in rows:
            raise ConfigError(f"unknown clip id {cid!r}")
        frames = corpus.load_clip(cfg.data_dir, rows[cid]).frames
        maps = model.attention_maps(frames)
        stem = out / f"{cid}.heat"
        write_heatmap(stem, maps)
        written.append(stem)
        if plot:
            _plot_heatmap(stem, maps)
    return written


def _plot_heatmap(stem, maps):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError(
            "heatmap plotting needs matplotlib (install extra 'plot')"
        ) from exc
    n, t, _, _ = maps.shape
    fig, axes = plt.subplots(n, t, figsize=(1.1 * t, 1.1 * n),
                             squeeze=False)
    for i in range(n):
        for j in range(t):
            axes[i][j].imshow(maps[i, j], cmap="viridis")
            axes[i][j].axis("off")
    fig.suptitle(Path(str(stem)).name)
    fig.savefig(f"{stem}.png", dpi=80, bbox_inches="tight")
    plt.close(fig)


# ----------------------- ablation -----------------------

ABLATION_ROWS = (
    # (stage1 branches or None, stage2 branches, fusion mode)
    (None, "global", None),
    ("global", "global", None),
    ("global_local", "global", None),
    ("global_local", "local", None),
    ("global_local", "global_local", "avg"),
    ("global_local", "global_local", "cem"),
)

_STAGE2_FUSION = {("global", None): "global_only",
                  ("local", None): "local_only",
                  ("global_local", "avg"): "avg",
                  ("global_local", "cem"): "cem"}


def ablate(base_cfg, stage1_steps=None, rows=ABLATION_ROWS):
    """Run the ablation grid from one base config; returns row dicts.

    Stage-1 checkpoints are shared across rows with the same branch
    setting.  Each row trains stage 2 under an identical step budget
    and evaluates the configured split.
    """
    from dataclasses import replace
    results = []
    stage1_ckpts = {}
    for s1, s2, fusion in rows:
        if s1 is not None and s1 not in stage1_ckpts:
            cfg1 = replace(base_cfg, stage=1, stage1_branches=s1,
                           out_dir=str(Path(base_cfg.out_dir) / f"s1-{s1}"),
                           steps=stage1_steps or base_cfg.steps)
            stage1_ckpts[s1] = train_stage1(cfg1)
        tag = f"{s1 or 'none'}__{s2}__{fusion or 'none'}"
        cfg2 = replace(
            base_cfg, stage=2, fusion=_STAGE2_FUSION[(s2, fusion)],
            init="scratch" if s1 is None else "stage1_checkpoint",
            init_checkpoint=str(stage1_ckpts[s1]) if s1 else "",
            out_dir=str(Path(base_cfg.out_dir) / f"s2-{tag}"))
        ckpt = train_stage2(cfg2)
        report = evaluate(cfg2, ckpt)
        results.append({"stage1": s1 or "none", "stage2": s2,
                        "fusion": fusion or "none",
                        "wer": report.overall_wer, "out_dir": cfg2.out_dir})
    summary = Path(base_cfg.out_dir) / "ablation.tsv"
    summary.parent.mkdir(parents=True, exist_ok=True)
    with open(summary, "w") as f:
        f.write("stage1\tstage2\tfusion\twer\n")
        for r in results:
            f.write(f"{r['stage1']}\t{r['stage2']}\t{r['fusion']}"
                    f"\t{r['wer']:.4f}\n")
    return results
