"""Independent brute-force re-implementations of the caption metrics.

Deliberately naive: plain loops, full DP tables, no shared code with the
package.  These are the reference the fast implementations are checked
against.
"""

from __future__ import annotations

import math


def ngram_list(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def oracle_bleu(candidates, references, max_n=4):
    """Corpus BLEU-1..max_n on the 0-100 scale, closest-ref brevity penalty."""
    numer = [0] * max_n
    denom = [0] * max_n
    cand_total = 0
    ref_total = 0
    for cand, refs in zip(candidates, references):
        cand_total += len(cand)
        best = None
        for ref in refs:
            key = (abs(len(ref) - len(cand)), len(ref))
            if best is None or key < best:
                best = key
        ref_total += best[1]
        for n in range(1, max_n + 1):
            cand_grams = ngram_list(cand, n)
            denom[n - 1] += len(cand_grams)
            for gram in set(cand_grams):
                have = cand_grams.count(gram)
                allowed = 0
                for ref in refs:
                    allowed = max(allowed, ngram_list(ref, n).count(gram))
                numer[n - 1] += min(have, allowed)
    if not candidates:
        raise ValueError("empty candidate corpus")
    if cand_total == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_total > ref_total else math.exp(1.0 - ref_total / cand_total)
    scores = []
    for k in range(1, max_n + 1):
        log_sum = 0.0
        degenerate = False
        for n in range(1, k + 1):
            if numer[n - 1] == 0 or denom[n - 1] == 0:
                degenerate = True
                break
            log_sum += math.log(numer[n - 1] / denom[n - 1])
        scores.append(0.0 if degenerate else 100.0 * bp * math.exp(log_sum / k))
    return scores


def lcs_table(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def oracle_rouge_l(candidates, references, beta=1.2):
    total = 0.0
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            if len(cand) == 0 or len(ref) == 0:
                continue
            lcs = lcs_table(cand, ref)
            if lcs == 0:
                continue
            prec = lcs / len(cand)
            rec = lcs / len(ref)
            f = (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)
            best = max(best, f)
        total += best
    return 100.0 * total / len(candidates)


def oracle_cider(candidates, references, max_n=4):
    """Plain consensus metric on the raw 0-10 scale."""
    n_images = len(references)
    scores = []
    for cand, refs in zip(candidates, references):
        per_n = []
        for n in range(1, max_n + 1):
            cand_grams = ngram_list(cand, n)
            cand_vec = {}
            for gram in set(cand_grams):
                df = 0
                for other_refs in references:
                    if any(gram in ngram_list(r, n) for r in other_refs):
                        df += 1
                idf = math.log(n_images / max(1.0, df))
                cand_vec[gram] = cand_grams.count(gram) * idf
            sims = []
            for ref in refs:
                ref_grams = ngram_list(ref, n)
                ref_vec = {}
                for gram in set(ref_grams):
                    df = 0
                    for other_refs in references:
                        if any(gram in ngram_list(r, n) for r in other_refs):
                            df += 1
                    idf = math.log(n_images / max(1.0, df))
                    ref_vec[gram] = ref_grams.count(gram) * idf
                dot = sum(cand_vec.get(g, 0.0) * ref_vec.get(g, 0.0)
                          for g in set(cand_vec) | set(ref_vec))
                na = math.sqrt(sum(v * v for v in cand_vec.values()))
                nb = math.sqrt(sum(v * v for v in ref_vec.values()))
                sims.append(dot / (na * nb) if na > 0 and nb > 0 else 0.0)
            per_n.append(sum(sims) / len(sims))
        scores.append(10.0 * sum(per_n) / max_n)
    return sum(scores) / len(scores)


def greedy_alignment(cand, ref):
    taken = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, rtok in enumerate(ref):
            if not taken[j] and rtok == tok:
                taken[j] = True
                pairs.append((i, j))
                break
    return pairs


def oracle_meteor_lite(candidates, references):
    total = 0.0
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            pairs = greedy_alignment(cand, ref)
            m = len(pairs)
            if m == 0 or len(cand) == 0 or len(ref) == 0:
                continue
            prec = m / len(cand)
            rec = m / len(ref)
            f_mean = 10.0 * prec * rec / (rec + 9.0 * prec)
            chunks = 1
            for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
                if i1 != i0 + 1 or j1 != j0 + 1:
                    chunks += 1
            penalty = 0.5 * (chunks / m) ** 3
            best = max(best, f_mean * (1.0 - penalty))
        total += best
    return 100.0 * total / len(candidates)
