"""Command-line entry points for every pipeline stage and the server."""

from __future__ import annotations

import json
from pathlib import Path

import click


@click.group()
def main() -> None:
    """Entity-graph learning engine: offline relation mining, online targeting."""


@main.command("gen-data")
@click.option("--n-entities", default=1000, show_default=True)
@click.option("--n-communities", default=10, show_default=True)
@click.option("--intra-p", default=0.1, show_default=True)
@click.option("--inter-p", default=0.001, show_default=True)
@click.option("--n-users", default=500, show_default=True)
@click.option("--walks-per-user", default=5, show_default=True)
@click.option("--walk-len", default=20, show_default=True)
@click.option("--semantic-dim", default=32, show_default=True)
@click.option("--semantic-noise", default=0.05, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def gen_data_cmd(n_entities, n_communities, intra_p, inter_p, n_users,
                 walks_per_user, walk_len, semantic_dim, semantic_noise, seed, out):
    """Generate a synthetic world with planted relations."""
    from .datagen import gen_world, save_world
    from .extract import write_logs
    from .service import _logs_from_sequences

    world = gen_world(
        n_entities=n_entities, n_communities=n_communities, intra_p=intra_p,
        inter_p=inter_p, n_users=n_users, walk_len=walk_len, seed=seed,
        walks_per_user=walks_per_user, semantic_dim=semantic_dim,
        semantic_noise=semantic_noise,
    )
    save_world(world, out)
    write_logs(_logs_from_sequences(world.sequences, world.lexicon), Path(out) / "logs.jsonl")
    click.echo(f"world: {world.n_entities} entities, {world.truth_graph.num_edges} edges, "
               f"{len(world.sequences)} users -> {out}")


@main.command("extract")
@click.option("--logs", "logs_path", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", required=True, type=click.Path(exists=True))
@click.option("--window-days", default=30, show_default=True)
@click.option("--now", "now_ts", default=None, type=int, help="window anchor (default: newest log)")
@click.option("--out", required=True, type=click.Path())
def extract_cmd(logs_path, lexicon_path, window_days, now_ts, out):
    """Tag behavior logs and build per-user entity sequences."""
    from .core import load_lexicon, write_sequences
    from .extract import build_sequences, read_logs

    lexicon = load_lexicon(lexicon_path)
    seqs = build_sequences(read_logs(logs_path), lexicon, window_days=window_days, now=now_ts)
    write_sequences(seqs, out)
    click.echo(f"{len(seqs)} user sequences -> {out}")


@main.command("candgen")
@click.option("--sequences", "sequences_path", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", required=True, type=click.Path(exists=True))
@click.option("--semantic-mode", type=click.Choice(["file", "hash"]), default="hash", show_default=True)
@click.option("--semantic-file", default=None, type=click.Path())
@click.option("--dim", default=64, show_default=True)
@click.option("--window", default=5, show_default=True)
@click.option("--kneg", default=5, show_default=True)
@click.option("--epochs", default=5, show_default=True)
@click.option("--lr", default=1.0, show_default=True)
@click.option("--topk", default=50, show_default=True)
@click.option("--min-sim", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-cand", required=True, type=click.Path())
@click.option("--out-eco", required=True, type=click.Path())
@click.option("--out-ese", required=True, type=click.Path())
def candgen_cmd(sequences_path, lexicon_path, semantic_mode, semantic_file, dim, window,
                kneg, epochs, lr, topk, min_sim, seed, out_cand, out_eco, out_ese):
    """Train co-occurrence embeddings and emit the candidate graph."""
    from .candgen import SemanticProvider, SgnsConfig, generate_candidates, semantic_embed, train_sgns
    from .core import load_lexicon, read_sequences, write_edges, write_embeddings

    lexicon = load_lexicon(lexicon_path)
    sequences = read_sequences(sequences_path)
    e_co = train_sgns(sequences, lexicon,
                      SgnsConfig(dim=dim, window=window, k_neg=kneg, epochs=epochs, lr=lr),
                      seed=seed)
    if semantic_mode == "file":
        provider = SemanticProvider(mode="file", path=semantic_file)
    else:
        provider = SemanticProvider(mode="char_ngram_hash")
    e_se = semantic_embed(lexicon, provider)
    cand = generate_candidates(e_co, e_se, top_k=topk, min_sim=min_sim)
    write_embeddings(e_co, out_eco)
    write_embeddings(e_se, out_ese)
    write_edges(cand, out_cand)
    click.echo(f"candidates: {cand.num_edges} edges -> {out_cand}")


@main.command("split")
@click.option("--edges", "edges_path", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", required=True, type=click.Path(exists=True))
@click.option("--test-frac", default=0.1, show_default=True)
@click.option("--neg-ratio", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def split_cmd(edges_path, lexicon_path, test_frac, neg_ratio, seed, out):
    """Hold out edges for link-prediction training and testing."""
    from .core import load_lexicon, read_edges
    from .datagen import save_split, split_edges

    lexicon = load_lexicon(lexicon_path)
    graph = read_edges(edges_path, lexicon)
    split = split_edges(graph, test_frac, neg_ratio, seed=seed)
    save_split(split, out)
    click.echo(f"split: {len(split.train_pos)}+{len(split.train_neg)} train, "
               f"{len(split.test_pos)}+{len(split.test_neg)} test -> {out}")


def _load_training_context(cand_path, split_dir, ese_path, eco_path):
    from .core import read_edges, read_embeddings
    from .datagen import load_split

    e_se = read_embeddings(ese_path)
    e_co = read_embeddings(eco_path)
    split = load_split(split_dir, e_se.n)
    cand = read_edges(cand_path, e_se.n) if cand_path else None
    return split, cand, e_se, e_co


@main.command("train-alpc")
@click.option("--cand", "cand_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_dir", required=True, type=click.Path(exists=True))
@click.option("--ese", "ese_path", required=True, type=click.Path(exists=True))
@click.option("--eco", "eco_path", required=True, type=click.Path(exists=True))
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--beta", default=1.0, show_default=True)
@click.option("--tau", default=0.2, show_default=True)
@click.option("--anchor-sim", default=0.8, show_default=True)
@click.option("--layers", default=2, show_default=True)
@click.option("--hidden", default=32, show_default=True)
@click.option("--cap", default=10, show_default=True)
@click.option("--batch", default=4096, show_default=True)
@click.option("--lr", default=0.05, show_default=True)
@click.option("--epochs", default=30, show_default=True)
@click.option("--patience", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--bootstrap/--no-bootstrap", default=False, show_default=True)
@click.option("--out", required=True, type=click.Path())
def train_alpc_cmd(cand_path, split_dir, ese_path, eco_path, alpha, beta, tau, anchor_sim,
                   layers, hidden, cap, batch, lr, epochs, patience, seed, bootstrap, out):
    """Train one ranking model on the edge split."""
    from .alpc import AlpcHyper, save_model, train_alpc

    split, cand, e_se, e_co = _load_training_context(cand_path, split_dir, ese_path, eco_path)
    hyper = AlpcHyper(alpha=alpha, beta=beta, tau=tau, anchor_sim_threshold=anchor_sim,
                      layers=layers, hidden=hidden, neighbor_cap=cap, batch_size=batch,
                      lr=lr, epochs=epochs, patience=patience)
    result = train_alpc(split, cand, e_se, e_co, hyper, seed=seed, bootstrap=bootstrap)
    save_model(result.model, out)
    for h in result.history:
        click.echo(f"epoch {h['epoch']}: train={h['train_loss']:.4f} val={h['val_loss']:.4f}")
    click.echo(f"model -> {out} (best epoch {result.best_epoch})")


def _eval_alpc(model_path, cand_path, split_dir, ese_path, eco_path):
    from .alpc import evaluate, load_model

    split, cand, e_se, e_co = _load_training_context(cand_path, split_dir, ese_path, eco_path)
    model = load_model(model_path).bind(split.observed_graph, e_se, e_co)
    metrics = evaluate(model, split.test_pos, split.test_neg)
    click.echo(json.dumps(metrics, sort_keys=True))


_eval_options = [
    click.option("--model", "model_path", required=True, type=click.Path(exists=True)),
    click.option("--cand", "cand_path", default=None, type=click.Path()),
    click.option("--split", "split_dir", required=True, type=click.Path(exists=True)),
    click.option("--ese", "ese_path", required=True, type=click.Path(exists=True)),
    click.option("--eco", "eco_path", required=True, type=click.Path(exists=True)),
]


def _with_options(opts):
    def wrap(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn
    return wrap


@main.command("eval-alpc")
@_with_options(_eval_options)
def eval_alpc_cmd(model_path, cand_path, split_dir, ese_path, eco_path):
    """Report AUC and accuracy of a trained ranking model."""
    _eval_alpc(model_path, cand_path, split_dir, ese_path, eco_path)


@main.command("eval")
@_with_options(_eval_options)
def eval_cmd(model_path, cand_path, split_dir, ese_path, eco_path):
    """Alias of eval-alpc."""
    _eval_alpc(model_path, cand_path, split_dir, ese_path, eco_path)


@main.command("ensemble")
@click.option("--models", "model_paths", required=True, multiple=True, type=click.Path(exists=True))
@click.option("--split", "split_dir", required=True, type=click.Path(exists=True))
@click.option("--ese", "ese_path", required=True, type=click.Path(exists=True))
@click.option("--eco", "eco_path", required=True, type=click.Path(exists=True))
@click.option("--heads", default=4, show_default=True)
@click.option("--dim", default=32, show_default=True)
@click.option("--epochs", default=60, show_default=True)
@click.option("--lr", default=0.02, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-params", required=True, type=click.Path())
@click.option("--out-embed", required=True, type=click.Path())
def ensemble_cmd(model_paths, split_dir, ese_path, eco_path, heads, dim, epochs, lr,
                 seed, out_params, out_embed):
    """Fuse ranking-model snapshots and export the fused entity embeddings."""
    from .alpc import load_model
    from .core import write_embeddings
    from .ensemble import EnsembleHyper, save_ensemble, stack_snapshots, train_ensemble

    split, _, e_se, e_co = _load_training_context(None, split_dir, ese_path, eco_path)
    models = [load_model(p).bind(split.observed_graph, e_se, e_co) for p in model_paths]
    stack = stack_snapshots(models, split.observed_graph, e_se, e_co)
    hyper = EnsembleHyper(n_heads=heads, model_dim=dim, epochs=epochs, lr=lr)
    result = train_ensemble(stack, split, hyper, seed=seed)
    save_ensemble(result.model, out_params)
    write_embeddings(result.embeddings, out_embed)
    click.echo(f"ensemble -> {out_params}; fused embeddings -> {out_embed}")


@main.command("filter-edges")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--cand", "cand_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_dir", required=True, type=click.Path(exists=True))
@click.option("--ese", "ese_path", required=True, type=click.Path(exists=True))
@click.option("--eco", "eco_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def filter_edges_cmd(model_path, cand_path, split_dir, ese_path, eco_path, out):
    """Keep candidate edges that clear the model's adaptive thresholds."""
    from .alpc import filter_edges, load_model
    from .core import write_edges

    split, cand, e_se, e_co = _load_training_context(cand_path, split_dir, ese_path, eco_path)
    model = load_model(model_path).bind(split.observed_graph, e_se, e_co)
    filtered = filter_edges(model, cand)
    write_edges(filtered, out)
    click.echo(f"kept {filtered.num_edges} of {cand.num_edges} candidate edges -> {out}")


@main.command("build-store")
@click.option("--filtered", "filtered_path", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", required=True, type=click.Path(exists=True))
@click.option("--feedback", "feedback_path", default=None, type=click.Path())
@click.option("--built-at", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def build_store_cmd(filtered_path, lexicon_path, feedback_path, built_at, out):
    """Assemble and persist the final entity graph."""
    from .core import load_lexicon, read_edges, sha256_file
    from .graphstore import build_store, save_store
    from .service import FeedbackLedger

    lexicon = load_lexicon(lexicon_path)
    filtered = read_edges(filtered_path, lexicon)
    pairs = FeedbackLedger.open(feedback_path).pairs() if feedback_path else []
    store = build_store(filtered, feedback_edges=pairs, built_at=built_at,
                        source_hashes={"filtered": sha256_file(filtered_path)})
    save_store(store, out)
    click.echo(f"store: {store.graph.num_edges} edges -> {out}")


@main.command("build-index")
@click.option("--sequences", "sequences_path", required=True, type=click.Path(exists=True))
@click.option("--embed", "embed_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def build_index_cmd(sequences_path, embed_path, out):
    """Precompute user embeddings for top-K targeting."""
    from .core import read_embeddings, read_sequences
    from .preference import build_index, save_index

    he = read_embeddings(embed_path)
    index = build_index(read_sequences(sequences_path), he)
    save_index(index, out)
    click.echo(f"index: {index.n_users} users -> {out}")


@main.command("serve")
@click.option("--state", "state_dir", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
def serve_cmd(state_dir, host, port):
    """Serve the online API over a built state directory."""
    import uvicorn

    from .service import create_app, load_state

    app = create_app(load_state(state_dir))
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command("pipeline")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--logs", "logs_path", default=None, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", default=None, type=click.Path(exists=True))
@click.option("--semantic-file", default=None, type=click.Path(exists=True))
@click.option("--truth", default=None, type=click.Path(exists=True))
@click.option("--communities", default=None, type=click.Path(exists=True))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="override a config key (repeatable; wins over the file)")
def pipeline_cmd(config_path, out, logs_path, lexicon_path, semantic_file, truth,
                 communities, overrides):
    """Run the full offline pipeline and write the build manifest."""
    from .core import RunConfig
    from .service import run_pipeline

    config = RunConfig.from_file(config_path) if config_path else RunConfig()
    parsed = {}
    for item in overrides:
        if "=" not in item:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        parsed[key.strip()] = value.strip()
    if parsed:
        config = config.with_overrides(parsed)
    manifest = run_pipeline(
        config, out,
        logs_path=logs_path, lexicon_path=lexicon_path, semantic_path=semantic_file,
        truth_path=truth, communities_path=communities,
    )
    click.echo(json.dumps(manifest["metrics"], sort_keys=True))
    click.echo(f"manifest -> {Path(out) / 'manifest.json'}")


if __name__ == "__main__":
    main()
