"""Online serving and offline pipeline orchestration.

The HTTP layer is a thin JSON API over an immutable ServiceState snapshot:
entity search, k-hop expansion, top-K user export, feedback recording, and
build metrics.  ``run_pipeline`` executes the whole offline flow (extract ->
candidate generation -> split -> ranking snapshots -> ensemble -> filter ->
store -> index -> evaluate) and writes a deterministic build manifest.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import alpc as alpc_mod
from . import ensemble as ensemble_mod
from .candgen import SemanticProvider, SgnsConfig, generate_candidates, semantic_embed, train_sgns
from .core import (
    EmbeddingTable,
    EntityGraph,
    EntityLexicon,
    RunConfig,
    load_lexicon,
    read_edges,
    read_embeddings,
    read_sequences,
    sha256_file,
    write_edges,
    write_embeddings,
    write_lexicon,
    write_sequences,
)
from .datagen import (
    DataSplit,
    gen_world,
    load_communities,
    load_split,
    save_split,
    save_world,
    split_edges,
)
from .extract import BehaviorLog, build_sequences, read_logs, write_logs
from .graphstore import (
    StoredGraph,
    build_store,
    compute_aeec,
    compute_cors,
    expand,
    judge_against_truth,
    load_store,
    save_store,
)
from .preference import PreferenceIndex, build_index, load_index, save_index, target_users


class PipelineError(RuntimeError):
    """A pipeline stage failed; message carries the stage name and cause."""


# --------------------------------------------------------------------------
# Service state
# --------------------------------------------------------------------------


@dataclass
class FeedbackLedger:
    """Durable append-only set of operator-confirmed entity pairs."""

    path: Path
    _pairs: set[tuple[int, int]] = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @classmethod
    def open(cls, path: str | Path) -> "FeedbackLedger":
        ledger = cls(Path(path))
        if ledger.path.exists():
            with open(ledger.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        ledger._pairs.add(_canonical_pair(rec["src"], rec["dst"]))
        return ledger

    def add(self, src: int, dst: int) -> bool:
        """Record a pair; returns False when it was already present."""
        key = _canonical_pair(src, dst)
        with self._lock:
            if key in self._pairs:
                return False
            self._pairs.add(key)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"src": key[0], "dst": key[1]}) + "\n")
        return True

    def pairs(self) -> list[tuple[int, int]]:
        with self._lock:
            return sorted(self._pairs)

    def __len__(self) -> int:
        return len(self._pairs)


def _canonical_pair(src: int, dst: int) -> tuple[int, int]:
    src, dst = int(src), int(dst)
    return (min(src, dst), max(src, dst))


@dataclass
class ServiceState:
    lexicon: EntityLexicon
    store: StoredGraph
    index: PreferenceIndex
    manifest: dict | None
    feedback: FeedbackLedger
    config: RunConfig = field(default_factory=RunConfig)


def load_state(state_dir: str | Path, verify_hashes: bool = True) -> ServiceState:
    """Load a pipeline output directory for serving.

    With ``verify_hashes`` the store/index/embedding files must match the
    hashes recorded in the build manifest, guaranteeing all served components
    come from one pipeline run.
    """
    d = Path(state_dir)
    manifest = None
    manifest_path = d / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if verify_hashes:
            for name, rel in (("store_edges", "store/edges.tsv"),
                              ("fused_embeddings", "he.txt"),
                              ("index", "index.bin")):
                recorded = manifest.get("artifacts", {}).get(name)
                if recorded is not None and recorded != sha256_file(d / rel):
                    raise ValueError(
                        f"stale state: {rel} does not match the manifest hash for {name!r}"
                    )
    lexicon = load_lexicon(d / "lexicon.tsv")
    store = load_store(d / "store")
    he = read_embeddings(d / "he.txt")
    index = load_index(d / "index.bin", he)
    feedback = FeedbackLedger.open(d / "feedback.jsonl")
    return ServiceState(lexicon, store, index, manifest, feedback)


def search_entities(state: ServiceState, query: str, limit: int = 10) -> list[dict]:
    """Case-insensitive substring match, prefix hits first, then shorter
    names, then lower ids."""
    q = query.strip().lower()
    hits = []
    for ent in state.lexicon:
        pos = ent.name.find(q)
        if pos >= 0:
            hits.append((0 if pos == 0 else 1, len(ent.name), ent.id, ent))
    hits.sort(key=lambda t: t[:3])
    return [
        {"id": e.id, "name": e.name, "etype": e.etype}
        for _, _, _, e in hits[:limit]
    ]


# --------------------------------------------------------------------------
# HTTP app
# --------------------------------------------------------------------------


def create_app(state: ServiceState):
    """JSON-over-HTTP API (versioned under /v1) over one state snapshot."""
    from fastapi import FastAPI, HTTPException, Request
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse, Response

    app = FastAPI(title="entity graph service", version="1")
    app.state.egl = state
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(HTTPException)
    async def _error_body(request: Request, exc: HTTPException):
        return JSONResponse(
            status_code=exc.status_code,
            content={"code": exc.status_code, "message": str(exc.detail)},
        )

    def _current() -> ServiceState:
        return app.state.egl

    @app.get("/v1/entities/search")
    def entities_search(q: str = "", limit: int = 10):
        if not q.strip():
            raise HTTPException(400, "query parameter q must be non-empty")
        if limit < 1:
            raise HTTPException(400, "limit must be >= 1")
        return search_entities(_current(), q, limit)

    @app.get("/v1/graph/expand")
    def graph_expand(entity_id: int, hops: int | None = None, max_per_hop: int | None = None):
        state = _current()
        if hops is None:
            hops = state.config.default_hops
        if hops < 0:
            raise HTTPException(400, "hops must be >= 0")
        if not (0 <= entity_id < len(state.lexicon)):
            raise HTTPException(404, f"unknown entity {entity_id}")
        cap = max_per_hop if max_per_hop is not None else state.config.max_per_hop
        if cap < 1:
            raise HTTPException(400, "max_per_hop must be >= 1")
        result = expand(
            state.store, [entity_id], hops,
            max_per_hop=cap, max_nodes=state.config.expand_max_nodes,
        )
        return {
            "nodes": [
                {
                    "id": n.entity_id,
                    "name": state.lexicon.entity(n.entity_id).name,
                    "etype": state.lexicon.entity(n.entity_id).etype,
                    "hop": n.hop,
                    "parent": n.parent,
                }
                for n in result.nodes
            ],
            "edges": [
                {"src": e.src, "dst": e.dst, "score": e.score, "provenance": e.provenance}
                for e in result.edges
            ],
        }

    @app.post("/v1/targeting/export")
    def targeting_export(body: dict):
        state = _current()
        entity_ids = body.get("entity_ids") or []
        k = int(body.get("k", state.config.export_k))
        if not entity_ids:
            raise HTTPException(400, "entity_ids must be non-empty")
        if k < 1:
            raise HTTPException(400, "k must be >= 1")
        for e in entity_ids:
            if not (0 <= int(e) < len(state.lexicon)):
                raise HTTPException(404, f"unknown entity {e}")
        users = target_users(state.index, [int(e) for e in entity_ids], k)
        return {
            "users": [{"user_id": u, "score": s} for u, s in users],
            "count": len(users),
        }

    @app.post("/v1/feedback")
    def feedback(body: dict):
        state = _current()
        try:
            src, dst = int(body["src"]), int(body["dst"])
        except (KeyError, TypeError, ValueError):
            raise HTTPException(400, "body must carry integer src and dst") from None
        for e in (src, dst):
            if not (0 <= e < len(state.lexicon)):
                raise HTTPException(404, f"unknown entity {e}")
        if src == dst:
            raise HTTPException(400, "src and dst must differ")
        state.feedback.add(src, dst)
        return Response(status_code=204)

    @app.get("/v1/metrics")
    def metrics():
        state = _current()
        if state.manifest is None or "metrics" not in state.manifest:
            raise HTTPException(503, "no build metrics available yet")
        m = state.manifest["metrics"]
        return {
            "auc": m.get("auc"),
            "acc": m.get("acc"),
            "cors": m.get("cors"),
            "aeec": m.get("aeec"),
            "acc_variance": m.get("acc_variance"),
            "built_at": state.manifest.get("built_at", 0),
        }

    return app


# --------------------------------------------------------------------------
# Offline pipeline
# --------------------------------------------------------------------------


def _logs_from_sequences(sequences, lexicon) -> list[BehaviorLog]:
    """Synthesize behavior logs from entity sequences (one log per event),
    so generated worlds exercise the extractor end to end."""
    logs = []
    for seq in sequences:
        for ts, eid in seq.events:
            logs.append(BehaviorLog(seq.user_id, ts, lexicon.entity(eid).name))
    return logs


def run_pipeline(
    config: RunConfig,
    out_dir: str | Path,
    logs_path: str | Path | None = None,
    lexicon_path: str | Path | None = None,
    semantic_path: str | Path | None = None,
    truth_path: str | Path | None = None,
    communities_path: str | Path | None = None,
) -> dict:
    """Run the offline pipeline end to end and write ``manifest.json``.

    Without input paths a synthetic world is generated from the config (its
    planted truth then also powers the quality metrics).  Stages are skipped
    when ``config.resume`` is set and their outputs already exist.  The
    manifest is byte-deterministic for a fixed config.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def stage(name: str, outputs: list[Path], fn):
        if config.resume and outputs and all(p.exists() for p in outputs):
            return
        try:
            fn()
        except Exception as exc:
            raise PipelineError(f"stage {name!r} failed: {exc}") from exc

    # ---- inputs ------------------------------------------------------
    if logs_path is None or lexicon_path is None:
        world_dir = out / "world"

        def gen_inputs():
            world = gen_world(
                n_entities=config.n_entities,
                n_communities=config.n_communities,
                intra_p=config.intra_p,
                inter_p=config.inter_p,
                n_users=config.n_users,
                walk_len=config.walk_len,
                seed=config.seed,
                walks_per_user=config.walks_per_user,
                semantic_dim=config.semantic_dim,
                semantic_noise=config.semantic_noise,
            )
            save_world(world, world_dir)
            write_logs(_logs_from_sequences(world.sequences, world.lexicon), out / "logs.jsonl")
            write_lexicon(world.lexicon, out / "lexicon.tsv")

        stage("gen-data", [world_dir / "lexicon.tsv", out / "logs.jsonl", out / "lexicon.tsv"], gen_inputs)
        logs_path = out / "logs.jsonl"
        lexicon_path = out / "lexicon.tsv"
        if semantic_path is None and config.semantic_mode == "file":
            semantic_path = world_dir / "semantic.txt"
        if truth_path is None:
            truth_path = world_dir / "truth.tsv"
        if communities_path is None:
            communities_path = world_dir / "communities.tsv"

    lexicon = load_lexicon(lexicon_path)

    # ---- extract -----------------------------------------------------
    sequences_path = out / "sequences.jsonl"

    def do_extract():
        logs = read_logs(logs_path)
        seqs = build_sequences(logs, lexicon, window_days=config.window_days)
        write_sequences(seqs, sequences_path)

    stage("extract", [sequences_path], do_extract)
    sequences = read_sequences(sequences_path)

    # ---- candidate generation ----------------------------------------
    eco_path, ese_path, cand_path = out / "eco.txt", out / "ese.txt", out / "cand.tsv"

    def do_candgen():
        sgns = SgnsConfig(
            dim=config.sgns_dim,
            window=config.sgns_window,
            k_neg=config.sgns_kneg,
            epochs=config.sgns_epochs,
            lr=config.sgns_lr,
            unigram_power=config.unigram_power,
        )
        e_co = train_sgns(sequences, lexicon, sgns, seed=config.seed)
        if config.semantic_mode == "file":
            provider = SemanticProvider(mode="file", path=str(semantic_path))
        else:
            provider = SemanticProvider(
                mode="char_ngram_hash", ngram_n=config.ngram_n, buckets=config.ngram_buckets
            )
        e_se = semantic_embed(lexicon, provider)
        write_embeddings(e_co, eco_path)
        write_embeddings(e_se, ese_path)
        cand = generate_candidates(e_co, e_se, top_k=config.cand_topk, min_sim=config.cand_min_sim)
        write_edges(cand, cand_path)

    stage("candgen", [eco_path, ese_path, cand_path], do_candgen)
    e_co = read_embeddings(eco_path)
    e_se = read_embeddings(ese_path)
    cand = read_edges(cand_path, lexicon)

    # ---- split (of the stage-I graph, mirroring the holdout protocol) --
    split_dir = out / "split"

    def do_split():
        split = split_edges(cand, config.test_frac, config.train_neg_ratio, seed=config.seed)
        save_split(split, split_dir)

    stage("split", [split_dir / "observed.tsv"], do_split)
    split = load_split(split_dir, len(lexicon))

    # ---- ranking snapshots --------------------------------------------
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    model_paths = [models_dir / f"alpc_{i:02d}.bin" for i in range(config.snapshots)]
    hyper = alpc_mod.AlpcHyper(
        alpha=config.alpha,
        beta=config.beta,
        tau=config.tau,
        anchor_sim_threshold=config.anchor_sim_threshold,
        layers=config.gnn_layers,
        hidden=config.hidden_dim,
        neighbor_cap=config.neighbor_cap,
        batch_size=config.batch_size,
        contrastive_batch=config.contrastive_batch,
        lr=config.learning_rate,
        epochs=config.epochs,
        patience=config.patience,
        val_frac=config.val_frac,
        encoder=config.encoder,
    )

    def do_train():
        for i, path in enumerate(model_paths):
            result = alpc_mod.train_alpc(
                split, cand, e_se, e_co, hyper, seed=config.seed + i, bootstrap=True
            )
            alpc_mod.save_model(result.model, path)

    stage("train-alpc", model_paths, do_train)
    models = [alpc_mod.load_model(p).bind(split.observed_graph, e_se, e_co) for p in model_paths]

    # ---- ensemble ------------------------------------------------------
    ensemble_path, he_path = out / "ensemble.bin", out / "he.txt"

    def do_ensemble():
        stack = ensemble_mod.stack_snapshots(models, split.observed_graph, e_se, e_co)
        ens_hyper = ensemble_mod.EnsembleHyper(
            n_heads=config.ensemble_heads,
            model_dim=config.ensemble_dim,
            lr=config.ensemble_lr,
            epochs=config.ensemble_epochs,
        )
        result = ensemble_mod.train_ensemble(stack, split, ens_hyper, seed=config.seed)
        ensemble_mod.save_ensemble(result.model, ensemble_path)
        write_embeddings(result.embeddings, he_path)

    stage("ensemble", [ensemble_path, he_path], do_ensemble)
    he = read_embeddings(he_path)

    # ---- filter (latest snapshot decides) ------------------------------
    filtered_path = out / "filtered.tsv"

    def do_filter():
        filtered = alpc_mod.filter_edges(models[-1], cand)
        write_edges(filtered, filtered_path)

    stage("filter-edges", [filtered_path], do_filter)
    filtered = read_edges(filtered_path, lexicon)

    # ---- store ----------------------------------------------------------
    store_dir = out / "store"
    feedback = FeedbackLedger.open(out / "feedback.jsonl")

    def do_store():
        store = build_store(
            filtered,
            feedback_edges=feedback.pairs(),
            built_at=config.built_at,
            source_hashes={"filtered": sha256_file(filtered_path)},
        )
        save_store(store, store_dir)

    stage("build-store", [store_dir / "edges.tsv"], do_store)
    store = load_store(store_dir)

    # ---- index ----------------------------------------------------------
    index_path = out / "index.bin"

    def do_index():
        save_index(build_index(sequences, he), index_path)

    stage("build-index", [index_path], do_index)

    # ---- evaluate -------------------------------------------------------
    metrics: dict = {}
    try:
        stack = ensemble_mod.stack_snapshots(models, split.observed_graph, e_se, e_co)
        ens_model = ensemble_mod.load_ensemble(ensemble_path)
        ens_metrics = ensemble_mod.evaluate_ensemble(ens_model, stack, split.test_pos, split.test_neg)
        snapshot_metrics = [alpc_mod.evaluate(m, split.test_pos, split.test_neg) for m in models]
        metrics["auc"] = ens_metrics["auc"]
        metrics["acc"] = ens_metrics["acc"]
        metrics["snapshot_acc"] = [m["acc"] for m in snapshot_metrics]
        metrics["snapshot_auc"] = [m["auc"] for m in snapshot_metrics]
        metrics["acc_variance"] = float(np.var([m["acc"] for m in snapshot_metrics]))
        metrics["aeec"] = compute_aeec(store.graph, len(lexicon))
        metrics["n_store_edges"] = store.graph.num_edges
        metrics["n_candidate_edges"] = cand.num_edges
        if truth_path is not None and Path(truth_path).exists():
            truth = read_edges(truth_path, lexicon)
            communities = None
            if communities_path is not None and Path(communities_path).exists():
                communities = load_communities(communities_path, len(lexicon))
            from .datagen import edge_precision

            metrics["precision_candidate"] = edge_precision(cand, truth)
            metrics["precision_store"] = edge_precision(store.graph, truth)
            if store.graph.num_edges > 0:
                metrics["cors"] = compute_cors(
                    judge_against_truth(store.graph, truth, communities, mode="graded")
                )
    except Exception as exc:
        raise PipelineError(f"stage 'evaluate' failed: {exc}") from exc

    manifest = {
        "built_at": config.built_at,
        "config": config.to_dict(),
        "metrics": metrics,
        "artifacts": {
            "sequences": sha256_file(sequences_path),
            "cooccurrence_embeddings": sha256_file(eco_path),
            "semantic_embeddings": sha256_file(ese_path),
            "candidates": sha256_file(cand_path),
            "models": [sha256_file(p) for p in model_paths],
            "ensemble": sha256_file(ensemble_path),
            "fused_embeddings": sha256_file(he_path),
            "filtered": sha256_file(filtered_path),
            "store_edges": sha256_file(store_dir / "edges.tsv"),
            "index": sha256_file(index_path),
        },
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest
