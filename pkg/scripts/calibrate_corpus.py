"""Measure the planted-signal gates of the default corpus, fold by fold.

Runs the full ranking recipe (default corpus, month folds, RF 500x5 for the
positive-outcome label, RF 500x10 for the referral label) and prints the
quantities the acceptance gates check: counterfactual found rates versus the
simulated manual baseline and a stratified dummy, precision at 50 and 2000,
mean group importances, and permuted-label importance floors. Run this after
touching synthgen calibration knobs.

Usage: python scripts/calibrate_corpus.py [--seed 42] [--sweeps 300]
"""
import argparse
import time

import numpy as np

from streetrank import evaluate, features, learners, synthgen, tempcv


def group_importances_of(matrix, forest) -> dict:
    imp = learners.feature_importances(forest)
    out: dict = {}
    for grp, v in zip(matrix.groups, imp):
        out[grp] = out.get(grp, 0.0) + float(v)
    return out


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--sweeps", type=int, default=300,
                    help="topic-model fit sweeps (inference uses sweeps/10)")
    args = ap.parse_args()

    t0 = time.time()
    corpus = synthgen.generate_corpus(synthgen.GeneratorConfig(seed=args.seed))
    print(f"[{time.time() - t0:6.1f}s] corpus: {len(corpus.alerts)} alerts")

    base = features.build_base_features(corpus.alerts, corpus.outcomes,
                                        corpus.hotspots, corpus.weather_hours)
    print(f"[{time.time() - t0:6.1f}s] base features ready")

    folds = tempcv.make_folds(tempcv.CvConfig(
        data_start=corpus.config.start_date, data_end=corpus.config.end_date))
    row_of = {aid: i for i, aid in enumerate(base.alert_ids)}
    alert_of = {a.id: a for a in corpus.alerts}

    model_rates, base_rates, dummy_gaps = [], [], []
    po50, po2000, ref50 = [], [], []
    gimp: dict = {}
    last_fit = None
    for fi, fold in enumerate(folds):
        train = tempcv.apply_label_window(corpus.alerts, corpus.outcomes, fold, "train")
        test = tempcv.apply_label_window(corpus.alerts, corpus.outcomes, fold, "test")
        train_rows = [row_of[i] for i in train.ids]
        test_rows = [row_of[i] for i in test.ids]

        models = features.fit_topic_models(base, train_rows,
                                           sweeps=args.sweeps, seed=1000 + fi)
        priors = features.compute_lsp_priors(base, train_rows)
        m_train = features.finalize_matrix(base, models, priors, train_rows,
                                           infer_sweeps=max(args.sweeps // 10, 1))
        m_test = features.finalize_matrix(base, models, priors, test_rows,
                                          infer_sweeps=max(args.sweeps // 10, 1))

        po_rows = np.flatnonzero(train.positive >= 0)
        y = (train.positive[po_rows] == 1).astype(np.int64)
        rf = learners.fit_forest(m_train.values[po_rows], y,
                                 n_estimators=500, max_depth=5, seed=11)
        scores = learners.predict_scores(rf, m_test.values)
        ref_rf = learners.fit_forest(
            m_train.values, (train.referral == 1).astype(np.int64),
            n_estimators=500, max_depth=10, seed=12)
        ref_scores = learners.predict_scores(ref_rf, m_test.values)

        manual = synthgen.simulate_manual_baseline(corpus.alerts, corpus.outcomes,
                                                   fold.fold_id)
        k = manual.referral_count
        top = np.argsort(-scores, kind="stable")[:k]
        model_cf = corpus.counterfactual_rate([test.ids[i] for i in top])

        dummy = learners.fit_dummy(y, seed=5)
        dscores = learners.predict_scores(dummy, m_test.values)
        dtop = np.argsort(-dscores, kind="stable")[:k]
        dummy_cf = corpus.counterfactual_rate([test.ids[i] for i in dtop])
        pool_cf = corpus.counterfactual_rate(list(test.ids))

        created = np.array([alert_of[i].created_at.timestamp() for i in test.ids])
        ids = np.array(test.ids)
        po50.append(evaluate.metrics_at_k(scores, test.positive, created, ids, 50).precision)
        po2000.append(evaluate.metrics_at_k(scores, test.positive, created, ids, 2000).precision)
        ref50.append(evaluate.metrics_at_k(ref_scores, test.referral, created, ids, 50).precision)
        for g, v in group_importances_of(m_train, rf).items():
            gimp[g] = gimp.get(g, 0.0) + v / len(folds)
        last_fit = (m_train, po_rows, y)

        model_rates.append(model_cf)
        base_rates.append(manual.found_rate)
        dummy_gaps.append(abs(dummy_cf - pool_cf))
        print(f"fold {fold.fold_id}: model={model_cf:.4f} "
              f"baseline={manual.found_rate:.4f} "
              f"uplift={model_cf / manual.found_rate:.3f} "
              f"|dummy-pool|={dummy_gaps[-1]:.4f} "
              f"po50={po50[-1]:.3f} ref50={ref50[-1]:.3f}")

    avg_model = float(np.mean(model_rates))
    avg_base = float(np.mean(base_rates))
    print(f"[{time.time() - t0:6.1f}s] avg model={avg_model:.4f} "
          f"avg baseline={avg_base:.4f} "
          f"uplift of averages={avg_model / avg_base:.4f} (gate: >= 1.15)")
    print(f"max |dummy - pool| = {max(dummy_gaps):.4f} (gate: <= 0.03)")
    print(f"baseline found-rate band: [{min(base_rates):.3f}, {max(base_rates):.3f}] "
          f"mean {avg_base:.3f} (target: mean in [0.20, 0.30])")
    print(f"avg precision@50={np.mean(po50):.4f} @2000={np.mean(po2000):.4f} "
          f"(gate: @50 > @2000)")
    print(f"avg referral precision@50={np.mean(ref50):.4f} "
          f"(gate: > positive-outcome @50)")
    ranked = sorted(gimp.items(), key=lambda kv: -kv[1])
    print("mean group importances:",
          [(g, round(v, 4)) for g, v in ranked])
    top3 = {g for g, _ in ranked[:3]}
    print(f"Weather and WordCounts in top-3: "
          f"{'yes' if {'Weather', 'WordCounts'} <= top3 else 'NO'}")

    m_train, po_rows, y = last_fit
    ncols: dict = {}
    for g in m_train.groups:
        ncols[g] = ncols.get(g, 0) + 1
    total, n_groups = len(m_train.groups), len(ncols)
    permuted: dict = {}
    for pseed in range(5):
        yp = np.random.default_rng(pseed).permutation(y)
        rfp = learners.fit_forest(m_train.values[po_rows], yp,
                                  n_estimators=500, max_depth=5, seed=11)
        for g, v in group_importances_of(m_train, rfp).items():
            permuted[g] = permuted.get(g, 0.0) + v / 5.0
    print("permuted-label importances vs 2x uniform floor "
          "(floor = max(column share, 1/n_groups)):")
    for g in sorted(permuted, key=lambda g: -permuted[g]):
        limit = 2.0 * max(ncols[g] / total, 1.0 / n_groups)
        status = "FAIL" if permuted[g] >= limit else "ok"
        print(f"  {g:20s} {permuted[g]:.4f} vs {limit:.4f}  {status}")
    print(f"[{time.time() - t0:6.1f}s] done")


if __name__ == "__main__":
    main()
