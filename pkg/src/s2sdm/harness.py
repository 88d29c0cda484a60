"""End-to-end runs over a single output directory.

A run directory holds the generated dataset (vocab.txt plus
train/dev/test files), one checkpoint and one metrics CSV per training
phase, and the verification reports. Every phase derives its
randomness as RngStream(seed, (PHASE, epoch, ...)), a pure function of
the config seed and the epoch index, so an interrupted phase resumed
from its checkpoint replays the remaining epochs exactly as an
uninterrupted run would.

All metrics CSVs share one schema (METRICS_COLUMNS): phases that do
not produce a column (MLE has no matching estimate, say) write nan.
Floats are rendered with repr-faithful %.17g so identical runs produce
byte-identical files; wall_seconds is forced to 0 unless the config
asks for real timing, keeping the determinism contract over the whole
file.
"""

from __future__ import annotations

import csv
import os
import time
from collections import Counter

import numpy as np

from .augmenter import (
    ContAugConfig,
    ContinuousAugmenter,
    DiscreteAugmenter,
    pretrain_self_reconstruction,
)
from .baselines import (
    RamlConfig,
    RlConfig,
    TrainerConfig,
    raml_sample,
    train_mle,
    train_raml,
    train_reinforce,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, parse_config, render_config
from .errors import NumericalError, ParseError, UsageError, VerificationFailure
from .numcore import (
    ParamStore,
    RngStream,
    element,
    fd_check,
    mul,
    row,
    sub,
    sum_nodes,
    value_of,
)
from .objectives import (
    CombinedConfig,
    PointMassAugmenter,
    combined_step,
    estimate_marginal,
    fidelity_grads,
    match_grads,
)
from .oracle import (
    EnumSpace,
    TableDistribution,
    exact_kl,
    exact_marginal,
    exact_objective_grads,
    exact_raml_distribution,
)
from .rewards import bleu4, cont_sim, corpus_bleu
from .seqmodel import SeqModel, SeqModelConfig, TokenSeq, VecSeq, Vocab
from .tasks import (
    TaskSpec,
    generate,
    read_cont_dataset,
    read_dataset,
    read_vocab,
    write_cont_dataset,
    write_dataset,
    write_vocab,
)

METRICS_COLUMNS = ("epoch", "eta", "j_match_est", "entropy_est", "reward_src",
                   "reward_tgt", "dev_bleu", "dev_exact", "floor_hits",
                   "wall_seconds")

# RNG path tags; every stream in a run hangs off (seed, (TAG, ...))
INIT_BETA, INIT_THETA, INIT_GAMMA = 20, 21, 22
PRETRAIN, AUG_PRETRAIN, DM, MLE, RL, RAML, SAMPLE, CHECK = 10, 11, 12, 13, 14, 15, 16, 30

AUG_PRETRAIN_CAP = 128  # self-reconstruction prototype subsample


# ---------------------------------------------------------------------------
# run-directory plumbing


def _data_paths(config: TrainConfig, out_dir) -> dict:
    ext = "vseq" if config.task == "cont_label" else "tsv"
    paths = {name: os.path.join(out_dir, f"{name}.{ext}")
             for name in ("train", "dev", "test")}
    paths["vocab"] = os.path.join(out_dir, "vocab.txt")
    return paths


def _load_split(config: TrainConfig, paths: dict, vocab: Vocab, name: str):
    path = paths[name]
    if not os.path.exists(path):
        raise UsageError(f"missing dataset file {path}; run gen-data first")
    if config.task == "cont_label":
        return read_cont_dataset(path)
    return read_dataset(path, vocab)


def _load_data(config: TrainConfig, out_dir):
    paths = _data_paths(config, out_dir)
    if not os.path.exists(paths["vocab"]):
        raise UsageError(
            f"missing vocabulary file {paths['vocab']}; run gen-data first"
        )
    vocab = read_vocab(paths["vocab"])
    if vocab.n_content != config.vocab_size:
        raise UsageError(
            f"vocabulary holds {vocab.n_content} content tokens but the "
            f"config says {config.vocab_size}"
        )
    return vocab, (_load_split(config, paths, vocab, "train"),
                   _load_split(config, paths, vocab, "dev"),
                   _load_split(config, paths, vocab, "test"))


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def _write_metrics(path, rows, prefix=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for raw in prefix or []:
            writer.writerow(raw)
        for rowdict in rows:
            writer.writerow([_fmt(rowdict[c]) for c in METRICS_COLUMNS])


def _metrics_prefix(path, below_epoch: int) -> list:
    """Raw rows with epoch < below_epoch, kept verbatim across a resume."""
    if below_epoch <= 0 or not os.path.exists(path):
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise ParseError(f"{path}: unexpected metrics header {header!r}")
        return [raw for raw in reader if int(raw[0]) < below_epoch]


def _clock(config: TrainConfig):
    if config.wall_clock == "real":
        return time.perf_counter
    return lambda: 0.0


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"{what} became non-finite ({value!r}); aborting")


# ---------------------------------------------------------------------------
# model construction


def _model_config(config: TrainConfig, vocab: Vocab) -> SeqModelConfig:
    source_dim = config.source_dim if config.task == "cont_label" else None
    return SeqModelConfig(vocab=vocab, hidden=config.hidden,
                          embed=config.embed, max_len=config.model_max_len,
                          source_dim=source_dim)


def _build_beta(config: TrainConfig, vocab: Vocab) -> SeqModel:
    return SeqModel.init(_model_config(config, vocab),
                         RngStream(config.seed, (INIT_BETA,)))


def _aug_config(config: TrainConfig, vocab: Vocab) -> SeqModelConfig:
    return SeqModelConfig(vocab=vocab, hidden=config.aug_hidden,
                          embed=config.aug_embed, max_len=config.model_max_len)


def _build_augmenters(config: TrainConfig, vocab: Vocab):
    gamma = DiscreteAugmenter.init(_aug_config(config, vocab),
                                   RngStream(config.seed, (INIT_GAMMA,)),
                                   config.rollout_slack)
    if config.task == "cont_label":
        theta = ContinuousAugmenter.init(
            ContAugConfig(dim=config.source_dim, hidden=config.aug_hidden),
            RngStream(config.seed, (INIT_THETA,)),
        )
    else:
        theta = DiscreteAugmenter.init(_aug_config(config, vocab),
                                       RngStream(config.seed, (INIT_THETA,)),
                                       config.rollout_slack)
    return theta, gamma


def _install(store_label: str, stores: dict, target: ParamStore) -> ParamStore:
    if store_label not in stores:
        raise UsageError(f"checkpoint lacks the {store_label!r} parameters")
    loaded = stores[store_label]
    if not target.shape_compatible(loaded):
        raise UsageError(
            f"checkpoint {store_label!r} parameters do not match the "
            "configured model shapes"
        )
    return loaded


def _restore_models(config: TrainConfig, vocab: Vocab, stores: dict):
    beta = _build_beta(config, vocab)
    beta.params = _install("beta", stores, beta.params)
    theta, gamma = _build_augmenters(config, vocab)
    theta.params = _install("theta", stores, theta.params)
    gamma.params = _install("gamma", stores, gamma.params)
    return theta, gamma, beta


def _fidelity_rewards(config: TrainConfig):
    if not config.fidelity:
        return None, None
    token_reward = lambda sample, proto: bleu4(TokenSeq(sample.ids), proto)
    if config.task == "cont_label":
        return cont_sim, token_reward
    return token_reward, token_reward


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: SeqModel, pairs, beam: int) -> dict:
    """Corpus BLEU (0-100 scale), exact-match rate, mean gold log-prob."""
    if not pairs:
        return {"bleu": float("nan"), "exact": float("nan"),
                "mean_log_prob": float("nan"), "n_pairs": 0}
    predictions = [model.beam_decode(src, beam) for src, _ in pairs]
    references = [tgt for _, tgt in pairs]
    bleu = 100.0 * corpus_bleu(
        [TokenSeq(p.ids) for p in predictions], references
    )
    exact = float(np.mean([p == r for p, r in zip(predictions, references)]))
    mean_lp = float(np.mean([model.log_prob(src, tgt) for src, tgt in pairs]))
    return {"bleu": bleu, "exact": exact, "mean_log_prob": mean_lp,
            "n_pairs": len(pairs)}


def _blank_row(epoch: int, eta: float) -> dict:
    row = {c: float("nan") for c in METRICS_COLUMNS}
    row["epoch"] = epoch
    row["eta"] = eta
    row["floor_hits"] = 0
    return row


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(config: TrainConfig, out_dir) -> dict:
    """Generate the configured task's splits and write them to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    spec = TaskSpec(kind=config.task, vocab_size=config.vocab_size,
                    min_len=config.min_len, max_len=config.max_len,
                    noise=config.noise, n_train=config.n_train,
                    n_dev=config.n_dev, n_test=config.n_test,
                    seed=config.seed, source_dim=config.source_dim)
    data = generate(spec)
    paths = _data_paths(config, out_dir)
    write_vocab(data.vocab, paths["vocab"])
    for name, split in data.splits().items():
        if config.task == "cont_label":
            write_cont_dataset(split, paths[name])
        else:
            write_dataset(split, paths[name], data.vocab)
    return {"paths": paths, "sizes": {name: len(split) for name, split
                                      in data.splits().items()}}


def _pretrain_augmenter(augmenter, prototypes, config: TrainConfig) -> None:
    unique = []
    seen = set()
    for proto in prototypes:
        key = proto.key()
        if key not in seen:
            seen.add(key)
            unique.append(proto)
        if len(unique) == AUG_PRETRAIN_CAP:
            break
    pretrain_self_reconstruction(augmenter, unique,
                                 config.aug_pretrain_epochs, config.aug_eta)


def cmd_pretrain(config: TrainConfig, out_dir) -> dict:
    """MLE-pretrain the model to dev convergence, then both augmenters."""
    vocab, (train, dev, _) = _load_data(config, out_dir)
    beta = _build_beta(config, vocab)
    theta, gamma = _build_augmenters(config, vocab)
    clock = _clock(config)
    rows = []
    state = {"best": -np.inf, "stale": 0, "t0": clock()}

    def on_epoch(epoch: int, loss: float) -> bool:
        _check_finite(loss, "pretraining loss")
        dev_report = evaluate_model(beta, dev, config.beam)
        row = _blank_row(epoch, config.lr_at(epoch))
        row["dev_bleu"] = dev_report["bleu"]
        row["dev_exact"] = dev_report["exact"]
        row["wall_seconds"] = clock() - state["t0"]
        rows.append(row)
        state["t0"] = clock()
        score = dev_report["mean_log_prob"]
        if np.isnan(score):
            return False  # no dev set; run every epoch
        if score > state["best"] + 1e-12:
            state["best"], state["stale"] = score, 0
            return False
        state["stale"] += 1
        return state["stale"] >= config.patience

    trainer = TrainerConfig(epochs=config.pretrain_epochs, eta=config.eta,
                            batch_size=config.batch_size,
                            anneal=config.anneal_factor,
                            anneal_every=config.anneal_every_epochs)
    train_mle(beta, train, trainer, RngStream(config.seed, (PRETRAIN,)),
              on_epoch=on_epoch)

    if config.aug_pretrain_epochs > 0:
        _pretrain_augmenter(theta, [src for src, _ in train], config)
        _pretrain_augmenter(gamma, [tgt for _, tgt in train], config)

    ckpt_path = os.path.join(out_dir, "pretrain.ckpt")
    metrics_path = os.path.join(out_dir, "pretrain_metrics.csv")
    save_checkpoint(ckpt_path, render_config(config), {"pretrained": 1},
                    RngStream(config.seed, (PRETRAIN,)).state(),
                    {"theta": theta.params, "gamma": gamma.params,
                     "beta": beta.params})
    _write_metrics(metrics_path, rows)
    dev_report = evaluate_model(beta, dev, config.beam)
    return {"checkpoint": ckpt_path, "metrics": metrics_path,
            "epochs_run": len(rows), "dev": dev_report}


def cmd_train_dm(config: TrainConfig, out_dir, checkpoint_path) -> dict:
    """Alternating distribution-matching training from a checkpoint."""
    vocab, (train, dev, _) = _load_data(config, out_dir)
    ckpt = load_checkpoint(checkpoint_path)
    theta, gamma, beta = _restore_models(config, vocab, ckpt.stores)
    reward_src, reward_tgt = _fidelity_rewards(config)
    start_epoch = int(ckpt.counters.get("dm_epoch", 0))
    if start_epoch > config.train_epochs:
        raise UsageError(
            f"checkpoint is already {start_epoch} epochs in; nothing to do"
        )
    metrics_path = os.path.join(out_dir, "dm_metrics.csv")
    prefix = _metrics_prefix(metrics_path, start_epoch)
    cycle = (["augmenters"] * config.alt_augmenter
             + ["model"] * config.alt_model)
    base = RngStream(config.seed, (DM,))
    clock = _clock(config)
    rows = []
    for epoch in range(start_epoch, config.train_epochs):
        t0 = clock()
        order = base.split(epoch).split(0).permutation(len(train))
        pair_rng = base.split(epoch).split(1)
        eta = config.lr_at(epoch)
        j_vals, h_vals, src_vals, tgt_vals = [], [], [], []
        floor_hits = 0
        for j, idx in enumerate(order):
            step_config = CombinedConfig(
                update=cycle[j % len(cycle)], n_samples=config.n_samples,
                eta=eta, entropy_weight=config.entropy_weight,
                reward_src=reward_src, reward_tgt=reward_tgt,
            )
            report = combined_step(train[idx], theta, gamma, beta,
                                   step_config, pair_rng.split(j))
            _check_finite(report.j_match_estimate, "matching objective")
            j_vals.append(report.j_match_estimate)
            h_vals.append(report.entropy_estimate)
            src_vals.append(report.mean_reward_src)
            tgt_vals.append(report.mean_reward_tgt)
            floor_hits += report.floor_hits
        dev_report = evaluate_model(beta, dev, config.beam)
        row = _blank_row(epoch, eta)
        row["j_match_est"] = float(np.mean(j_vals))
        row["entropy_est"] = float(np.mean(h_vals))
        row["reward_src"] = float(np.mean(src_vals))
        row["reward_tgt"] = float(np.mean(tgt_vals))
        row["dev_bleu"] = dev_report["bleu"]
        row["dev_exact"] = dev_report["exact"]
        row["floor_hits"] = floor_hits
        row["wall_seconds"] = clock() - t0
        rows.append(row)

    ckpt_path = os.path.join(out_dir, "dm.ckpt")
    save_checkpoint(ckpt_path, render_config(config),
                    {"dm_epoch": config.train_epochs}, base.state(),
                    {"theta": theta.params, "gamma": gamma.params,
                     "beta": beta.params})
    _write_metrics(metrics_path, rows, prefix)
    return {"checkpoint": ckpt_path, "metrics": metrics_path,
            "epochs_run": len(rows),
            "dev": evaluate_model(beta, dev, config.beam)}


def cmd_train_baseline(config: TrainConfig, kind: str, out_dir,
                       checkpoint_path=None) -> dict:
    """One of the comparison trainers, logging the shared metrics schema."""
    if kind not in ("mle", "rl", "raml"):
        raise UsageError(f"unknown baseline kind {kind!r}")
    vocab, (train, dev, _) = _load_data(config, out_dir)

    start_epoch = 0
    rl_baselines = None
    if checkpoint_path is not None:
        ckpt = load_checkpoint(checkpoint_path)
        beta = _build_beta(config, vocab)
        beta.params = _install("beta", ckpt.stores, beta.params)
        start_epoch = int(ckpt.counters.get(f"{kind}_epoch", 0))
        if "rl_baselines" in ckpt.stores:
            rl_baselines = ckpt.stores["rl_baselines"]["values"].copy()
    elif kind == "rl":
        raise UsageError("train-rl needs a pretrained checkpoint")
    else:
        beta = _build_beta(config, vocab)

    metrics_path = os.path.join(out_dir, f"{kind}_metrics.csv")
    prefix = _metrics_prefix(metrics_path, start_epoch)
    clock = _clock(config)
    rows = []
    state = {"t0": clock()}

    def on_epoch(epoch: int, value: float) -> bool:
        _check_finite(value, f"{kind} epoch metric")
        dev_report = evaluate_model(beta, dev, config.beam)
        row = _blank_row(epoch, eta_of(epoch))
        row["dev_bleu"] = dev_report["bleu"]
        row["dev_exact"] = dev_report["exact"]
        row["wall_seconds"] = clock() - state["t0"]
        rows.append(row)
        state["t0"] = clock()
        return False

    base = RngStream(config.seed, ({"mle": MLE, "rl": RL, "raml": RAML}[kind],))
    if kind == "rl":
        rl_config = RlConfig(epochs=config.train_epochs, eta=config.eta,
                             rollout_slack=config.rl_slack,
                             baseline_decay=config.baseline_decay)
        eta_of = lambda epoch: config.eta
        max_steps = 1 + max(len(t.ids) for _, t in train) + config.rl_slack
        if rl_baselines is None:
            rl_baselines = np.zeros(max_steps)
        train_reinforce(beta, train, rl_config, base, on_epoch=on_epoch,
                        start_epoch=start_epoch, baselines=rl_baselines)
    else:
        trainer = TrainerConfig(epochs=config.train_epochs, eta=config.eta,
                                batch_size=config.batch_size,
                                anneal=config.anneal_factor,
                                anneal_every=config.anneal_every_epochs)
        eta_of = trainer.eta_at
        if kind == "mle":
            train_mle(beta, train, trainer, base, on_epoch=on_epoch,
                      start_epoch=start_epoch)
        else:
            raml = RamlConfig(tau=config.tau,
                              candidates_per_pair=config.raml_candidates)
            train_raml(beta, train, raml, trainer, base, on_epoch=on_epoch,
                       start_epoch=start_epoch)

    stores = {"beta": beta.params}
    if kind == "rl":
        stores["rl_baselines"] = ParamStore([("values", rl_baselines)])
    ckpt_path = os.path.join(out_dir, f"{kind}.ckpt")
    save_checkpoint(ckpt_path, render_config(config),
                    {f"{kind}_epoch": config.train_epochs}, base.state(),
                    stores)
    _write_metrics(metrics_path, rows, prefix)
    return {"checkpoint": ckpt_path, "metrics": metrics_path,
            "epochs_run": len(rows),
            "dev": evaluate_model(beta, dev, config.beam)}


def cmd_eval(config: TrainConfig, out_dir, checkpoint_path,
             split: str = "test") -> dict:
    """Beam-decode a split and report corpus BLEU, exact match, log-prob."""
    if split not in ("train", "dev", "test"):
        raise UsageError(f"unknown split {split!r}")
    vocab, splits = _load_data(config, out_dir)
    pairs = dict(zip(("train", "dev", "test"), splits))[split]
    ckpt = load_checkpoint(checkpoint_path)
    stored = parse_config(ckpt.config_text)
    if stored.vocab_size != vocab.n_content:
        raise UsageError(
            f"checkpoint was trained over {stored.vocab_size} content "
            f"tokens, dataset vocabulary has {vocab.n_content}"
        )
    beta = _build_beta(config, vocab)
    beta.params = _install("beta", ckpt.stores, beta.params)
    report = evaluate_model(beta, pairs, config.beam)
    out_path = os.path.join(out_dir, f"eval_{split}.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("split", "beam", "n_pairs", "bleu", "exact_match",
                         "mean_log_prob"))
        writer.writerow((split, config.beam, report["n_pairs"],
                         _fmt(report["bleu"]), _fmt(report["exact"]),
                         _fmt(report["mean_log_prob"])))
    report = dict(report, split=split, csv=out_path)
    return report


def cmd_sample(config: TrainConfig, out_dir, checkpoint_path,
               n_pairs: int = 3, n_samples: int = 3) -> str:
    """Readable dump: augmenter neighborhoods and beam decodes."""
    vocab, (train, dev, _) = _load_data(config, out_dir)
    pairs = (dev or train)[:n_pairs]
    ckpt = load_checkpoint(checkpoint_path)
    theta, gamma, beta = _restore_models(config, vocab, ckpt.stores)
    rng = RngStream(config.seed, (SAMPLE,))
    lines = []
    for i, (src, tgt) in enumerate(pairs):
        r = rng.split(i)
        if isinstance(src, TokenSeq):
            lines.append(f"source    | {src.render(vocab)}")
            for k in range(n_samples):
                x, _ = theta.sample(src, r.split(0).split(k))
                lines.append(f"  theta~  | {x.render(vocab)}")
        else:
            lines.append(f"source    | <{len(src)}x{src.dim} vectors>")
        lines.append(f"target    | {tgt.render(vocab)}")
        for k in range(n_samples):
            y, _ = gamma.sample(tgt, r.split(1).split(k))
            lines.append(f"  gamma~  | {y.render(vocab)}")
        decoded = beta.beam_decode(src, config.beam)
        lines.append(f"beam      | {decoded.render(vocab)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# verification commands


def _tamper_term(leaves, spec: tuple):
    """A term with zero value everywhere but nonzero reverse-mode gradient.

    c * (x - detach(x)) evaluates to 0 at every finite-difference probe
    (the detached copy re-reads the perturbed value), while the taped x
    still contributes c to the analytic gradient: exactly what a broken
    backward rule looks like to fd_check.
    """
    name, flat_index, scale = spec
    if name not in leaves:
        raise UsageError(f"tamper target {name!r} is not a parameter")
    leaf = leaves[name]
    arr = value_of(leaf)
    if arr.ndim == 2:
        i, j = np.unravel_index(flat_index, arr.shape)
        coord = element(row(leaf, int(i)), int(j))
    else:
        coord = element(leaf, int(flat_index))
    return mul(sub(coord, value_of(coord)), float(scale))


def _spread_params(module, rng: RngStream) -> None:
    """Redraw weights uniform(-1, 1) in place.

    The stock small-scale init leaves attention gradients at the finite
    difference noise floor; spread weights keep every coordinate live,
    so a failure means a wrong derivative rather than a tiny one.
    """
    store = ParamStore()
    for name, arr in module.params.items():
        store.add(name, rng.uniform(arr.shape) * 2.0 - 1.0)
    module.params = store


def _grad_check_programs(seed: int):
    """Named (program, params) pairs over tiny random instances."""
    vocab = Vocab.make(5)
    pair_rng = RngStream(seed, (CHECK, 0))
    src = TokenSeq(tuple(int(t) for t in pair_rng.integers(3, 8, 3)))
    tgt = TokenSeq(tuple(int(t) for t in pair_rng.integers(3, 8, 4)))

    checks = []

    model = SeqModel.init(
        SeqModelConfig(vocab=vocab, hidden=8, embed=5, max_len=4),
        RngStream(seed, (CHECK, 1)),
    )
    _spread_params(model, RngStream(seed, (CHECK, 1, 1)))
    checks.append(("seqmodel_log_prob",
                   lambda p: model.log_prob_node(p, src, tgt),
                   model.params))

    vec_model = SeqModel.init(
        SeqModelConfig(vocab=vocab, hidden=8, embed=5, max_len=4,
                       source_dim=3),
        RngStream(seed, (CHECK, 2)),
    )
    _spread_params(vec_model, RngStream(seed, (CHECK, 2, 1)))
    vec_src = VecSeq(RngStream(seed, (CHECK, 3)).normal((3, 3)))
    checks.append(("seqmodel_log_prob_vector_source",
                   lambda p: vec_model.log_prob_node(p, vec_src, tgt),
                   vec_model.params))

    disc = DiscreteAugmenter.init(
        SeqModelConfig(vocab=vocab, hidden=6, embed=4, max_len=6),
        RngStream(seed, (CHECK, 4)),
    )
    _spread_params(disc, RngStream(seed, (CHECK, 4, 1)))
    sample, _ = disc.sample(src, RngStream(seed, (CHECK, 5)))
    checks.append(("augmenter_discrete_log_prob",
                   lambda p: disc.log_prob_node(p, src, sample),
                   disc.params))

    cont = ContinuousAugmenter.init(ContAugConfig(dim=3, hidden=6, mlp=6),
                                    RngStream(seed, (CHECK, 6)))
    _spread_params(cont, RngStream(seed, (CHECK, 6, 1)))
    proto = VecSeq(RngStream(seed, (CHECK, 7)).normal((4, 3)))
    cont_sample, _, _ = cont.sample(proto, RngStream(seed, (CHECK, 8)))
    checks.append(("augmenter_continuous_log_prob",
                   lambda p: cont.log_prob_node(p, proto, cont_sample),
                   cont.params))

    batch = [(src, tgt), (tgt, src)]
    checks.append(("mle_loss",
                   lambda p: mul(sum_nodes(
                       [mul(model.log_prob_node(p, s, t), -1.0)
                        for s, t in batch]), 1.0 / len(batch)),
                   model.params))

    draw_rng = RngStream(seed, (CHECK, 9))
    xs = [disc.sample(src, draw_rng.split(k))[0] for k in range(4)]
    weights = [float(w) for w in RngStream(seed, (CHECK, 10)).normal(len(xs))]
    checks.append(("combined_objective_surrogate",
                   lambda p: sum_nodes([
                       mul(model.log_prob_node(p, x, tgt), w)
                       for x, w in zip(xs, weights)]),
                   model.params))
    return checks


def cmd_grad_check(config: TrainConfig, out_dir, tamper=None) -> dict:
    """fd_check every differentiable program; fail past 1e-6 relative error.

    ``tamper=(check_name, param_name, flat_index, scale)`` injects a
    zero-valued, nonzero-gradient term into one program so the failure
    path itself stays tested.
    """
    os.makedirs(out_dir, exist_ok=True)
    tolerance = 1e-6
    rows = []
    all_passed = True
    for name, program, params in _grad_check_programs(config.seed):
        if tamper is not None and tamper[0] == name:
            inner = program
            spoiled = tamper[1:]
            program = lambda p, _inner=inner, _s=spoiled: sum_nodes(
                [_inner(p), _tamper_term(p, _s)]
            )
        report = fd_check(program, params, 1e-5)
        passed = report.max_rel_err <= tolerance
        all_passed = all_passed and passed
        rows.append({"check": name, "n_coords": report.n_coords,
                     "max_rel_err": report.max_rel_err,
                     "tolerance": tolerance,
                     "worst_coordinate": report.worst_coord(),
                     "passed": passed})
    out_path = os.path.join(out_dir, "grad_check.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("check", "n_coords", "max_rel_err", "tolerance",
                         "worst_coordinate", "passed"))
        for row in rows:
            writer.writerow((row["check"], row["n_coords"],
                             _fmt(row["max_rel_err"]), _fmt(row["tolerance"]),
                             row["worst_coordinate"],
                             "pass" if row["passed"] else "fail"))
    if not all_passed:
        worst = max(rows, key=lambda r: r["max_rel_err"])
        raise VerificationFailure(
            f"gradient check failed: {worst['check']} at "
            f"{worst['worst_coordinate']} with relative error "
            f"{worst['max_rel_err']:.3e} (report: {out_path})"
        )
    return {"csv": out_path, "checks": rows}


def _oracle_check_rows(seed: int) -> list:
    rows = []

    def add(check: str, statistic: float, threshold: float, passed: bool):
        rows.append({"check": check, "statistic": float(statistic),
                     "threshold": float(threshold), "passed": bool(passed)})

    vocab = Vocab.make(3)
    space = EnumSpace(vocab, 2)
    pair = (TokenSeq((3,)), TokenSeq((4,)))
    table_rng = RngStream(seed, (CHECK, 20))
    n_atoms = space.n_terminated + len(space.boundary)
    theta = TableDistribution(space, 0.8 * table_rng.split(0).normal(n_atoms))
    gamma = TableDistribution(space, 0.8 * table_rng.split(1).normal(n_atoms))
    beta = SeqModel.init(
        SeqModelConfig(vocab=vocab, hidden=6, embed=4, max_len=2),
        RngStream(seed, (CHECK, 21)),
    )

    # matching estimator against finite differences of the exact objective
    exact_theta, exact_gamma, exact_beta = exact_objective_grads(
        theta, gamma, beta, pair, space
    )
    exact_flat = {"theta": exact_theta.flat(), "gamma": exact_gamma.flat(),
                  "beta": exact_beta.flat()}
    draw_rng = RngStream(seed, (CHECK, 22))
    n_draws, n_samples = 60, 30
    draws = {"theta": [], "gamma": [], "beta": []}
    for d in range(n_draws):
        result = match_grads(pair, theta, gamma, beta, n_samples,
                             draw_rng.split(d))
        draws["theta"].append(result.grads_theta.flat())
        draws["gamma"].append(result.grads_gamma.flat())
        draws["beta"].append(result.grads_beta.flat())
    for group, min_frac in (("theta", 0.9), ("gamma", 0.9), ("beta", 0.85)):
        stack = np.array(draws[group])
        se = np.maximum(stack.std(axis=0, ddof=1) / np.sqrt(n_draws), 1e-12)
        z = np.abs(stack.mean(axis=0) - exact_flat[group]) / se
        frac = float((z <= 3.0).mean())
        add(f"match_{group}_within_3se", frac, min_frac, frac >= min_frac)

    # fidelity: constant reward cancels exactly; zero-mean without baseline
    fid_rng = RngStream(seed, (CHECK, 23))
    flat = fidelity_grads(pair, theta, gamma, 8, fid_rng.split(0),
                          lambda s, p: 0.37, lambda s, p: 0.37)
    worst = max(np.max(np.abs(arr), initial=0.0)
                for arr in list(flat.grads_gamma.values())
                + list(flat.grads_theta.values()))
    add("fidelity_constant_reward_zero", worst, 0.0, worst == 0.0)
    fid_draws = []
    for d in range(100):
        result = fidelity_grads(pair, theta, gamma, 6, fid_rng.split(1 + d),
                                lambda s, p: bleu4(TokenSeq(s.ids), p),
                                lambda s, p: bleu4(TokenSeq(s.ids), p),
                                baseline=False)
        fid_draws.append(np.concatenate([result.grads_theta.flat(),
                                         result.grads_gamma.flat()]))
    # exact comparison value: gradient of -E_q[reward] through the softmax
    stack = np.array(fid_draws)
    se = np.maximum(stack.std(axis=0, ddof=1) / np.sqrt(len(stack)), 1e-12)

    def exact_fidelity_flat() -> np.ndarray:
        out = []
        for dist, proto in ((theta, pair[0]), (gamma, pair[1])):
            probs = np.exp(dist.log_atom_probs())
            rewards = np.array([bleu4(TokenSeq(a.ids), proto)
                                for a in space.atoms()])
            # d E[r] / d logit_i = p_i (r_i - E[r]); descent negates it
            out.append(-probs * (rewards - float(probs @ rewards)))
        return np.concatenate(out)

    z = np.abs(stack.mean(axis=0) - exact_fidelity_flat()) / se
    frac = float((z <= 3.0).mean())
    add("fidelity_within_3se", frac, 0.9, frac >= 0.9)

    # payoff sampler total variation
    raml_cfg = RamlConfig(tau=0.8)
    reference = TokenSeq((3, 4, 3))
    raml_vocab = Vocab.make(2)
    table = exact_raml_distribution(reference, raml_cfg,
                                    EnumSpace(raml_vocab, 3))
    counts = Counter()
    raml_rng = RngStream(seed, (CHECK, 24))
    n_raml = 20_000
    for k in range(n_raml):
        counts[raml_sample(reference, raml_vocab, raml_cfg,
                           raml_rng.split(k)).key()] += 1
    tv = 0.5 * sum(abs(counts.get(key, 0) / n_raml - p)
                   for key, p in table.probs.items())
    add("raml_total_variation", tv, 0.03, tv <= 0.03)

    # marginal estimator: exact collapse and statistical consistency
    y = TokenSeq((4,))
    x_star = pair[0]
    single = estimate_marginal(y, [x_star], beta)
    collapse = estimate_marginal(y, [x_star] * 7, beta)
    add("marginal_replicated_collapse", abs(collapse - single), 0.0,
        collapse == single)
    marg_rng = RngStream(seed, (CHECK, 25))
    estimates = []
    for d in range(30):
        xs = [theta.sample(x_star, marg_rng.split(d).split(k))[0]
              for k in range(200)]
        estimates.append(estimate_marginal(y, xs, beta))
    oracle_value = exact_marginal(theta, beta, x_star, y, space).value
    se = float(np.std(estimates, ddof=1) / np.sqrt(len(estimates)))
    z_marg = abs(float(np.mean(estimates)) - oracle_value) / max(se, 1e-300)
    add("marginal_z_score", z_marg, 4.0, z_marg <= 4.0)

    # degeneration to MLE is bitwise
    matched = match_grads(pair, PointMassAugmenter(), PointMassAugmenter(),
                          beta, 6, RngStream(seed, (CHECK, 26)),
                          entropy_weight=0.0)
    _, mle_grads = beta.mle_loss_grad([pair])
    worst = max(float(np.max(np.abs(matched.grads_beta[name] - mle_grads[name])))
                for name in mle_grads.names())
    add("degeneration_bitwise", worst, 0.0, worst == 0.0)

    # KL sign and tied-distribution zero
    kl_rng = RngStream(seed, (CHECK, 27))
    min_kl = np.inf
    for d in range(30):
        g = TableDistribution(space, 0.7 * kl_rng.split(d).normal(n_atoms))
        min_kl = min(min_kl, exact_kl(g, theta, beta, pair, space).kl)
    add("kl_nonnegative", min_kl, 0.0, min_kl >= 0.0)
    marginal_probs = np.array([
        exact_marginal(theta, beta, x_star, atom, space).value
        for atom in space.atoms()
    ])
    tied = TableDistribution(space, np.log(marginal_probs))
    tied_kl = exact_kl(tied, theta, beta, pair, space).kl
    add("kl_tied_zero", abs(tied_kl), 1e-12, abs(tied_kl) <= 1e-12)
    return rows


def cmd_oracle_check(config: TrainConfig, out_dir) -> dict:
    """Estimators against enumeration oracles at reduced draw counts."""
    os.makedirs(out_dir, exist_ok=True)
    rows = _oracle_check_rows(config.seed)
    out_path = os.path.join(out_dir, "oracle_check.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("check", "statistic", "threshold", "passed"))
        for row in rows:
            writer.writerow((row["check"], _fmt(row["statistic"]),
                             _fmt(row["threshold"]),
                             "pass" if row["passed"] else "fail"))
    failed = [row for row in rows if not row["passed"]]
    if failed:
        raise VerificationFailure(
            f"oracle check failed: {failed[0]['check']} measured "
            f"{failed[0]['statistic']:.6g} against threshold "
            f"{failed[0]['threshold']:.6g} (report: {out_path})"
        )
    return {"csv": out_path, "checks": rows}


# ---------------------------------------------------------------------------
# oracle probe used by the end-to-end acceptance run


def probe_kl(theta, gamma, beta, pairs, max_len: int = 3,
             x_top_k: int = 64) -> float:
    """Mean truncated-renormalized oracle KL over a handful of probe pairs."""
    if not pairs:
        raise UsageError("probe_kl needs at least one pair")
    vocab = beta.config.vocab
    space = EnumSpace(vocab, max_len)
    values = [
        exact_kl(gamma, theta, beta, pair, space, x_top_k=x_top_k,
                 renormalize=True).kl
        for pair in pairs
    ]
    return float(np.mean(values))
