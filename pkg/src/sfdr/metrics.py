"""Corpus-level caption metrics and the aggregate quality scores.

All operate on token lists.  BLEU, the exact-match METEOR variant and
ROUGE-L report on a 0-100 scale.  The consensus metric's raw value lives on
0-10; reports display it at 100x the raw score so that published tables line
up (values up to ~500).  The exact-match METEOR variant skips stemming and
synonym sets, so its numbers are not comparable to full METEOR results.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass

CIDER_REPORT_SCALE = 100.0   # raw 0-10 score -> table convention
ROUGE_BETA = 1.2


class MetricInputError(ValueError):
    """Candidate/reference corpora are empty or misaligned."""


def _check_corpus(candidates, references):
    if not candidates:
        raise MetricInputError("empty candidate corpus")
    if len(candidates) != len(references):
        raise MetricInputError(
            f"{len(candidates)} candidates vs {len(references)} reference sets")
    for i, refs in enumerate(references):
        if not refs:
            raise MetricInputError(f"image {i} has an empty reference set")


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def bleu(candidates, references, max_n: int = 4) -> list[float]:
    """Modified n-gram precision with clipping, geometric mean, brevity
    penalty against the closest reference length (ties favor the shorter)."""
    _check_corpus(candidates, references)
    clipped = [0] * max_n
    total = [0] * max_n
    c_len = 0
    r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            total[n - 1] += max(0, len(cand) - n + 1)
            if not counts:
                continue
            max_ref = Counter()
            for ref in refs:
                for gram, cnt in _ngrams(ref, n).items():
                    if cnt > max_ref[gram]:
                        max_ref[gram] = cnt
            clipped[n - 1] += sum(min(cnt, max_ref[gram])
                                  for gram, cnt in counts.items())
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    for k in range(1, max_n + 1):
        if any(clipped[n] == 0 or total[n] == 0 for n in range(k)):
            scores.append(0.0)
            continue
        mean_log = sum(math.log(clipped[n] / total[n]) for n in range(k)) / k
        scores.append(100.0 * bp * math.exp(mean_log))
    return scores


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def _lcs_len(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok in a:
        cur = [0] * (len(b) + 1)
        for j, btok in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if tok == btok else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, beta: float = ROUGE_BETA) -> float:
    """Mean over the corpus of the best F-measure of LCS precision/recall."""
    _check_corpus(candidates, references)
    beta2 = beta * beta
    total = 0.0
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            lcs = _lcs_len(cand, ref)
            if lcs == 0:
                continue
            prec = lcs / len(cand)
            rec = lcs / len(ref)
            best = max(best, (1 + beta2) * prec * rec / (rec + beta2 * prec))
        total += best
    return 100.0 * total / len(candidates)


# ---------------------------------------------------------------------------
# consensus metric (TF-IDF weighted n-gram cosine)
# ---------------------------------------------------------------------------

@dataclass
class CiderIdf:
    """Frozen document-frequency table built from reference corpora."""

    n_images: int
    doc_freq: dict    # ngram -> number of images whose references contain it
    max_n: int = 4

    @classmethod
    def from_references(cls, references, max_n: int = 4) -> "CiderIdf":
        doc_freq: dict = defaultdict(int)
        for refs in references:
            seen = set()
            for ref in refs:
                for n in range(1, max_n + 1):
                    seen.update(_ngrams(ref, n))
            for gram in seen:
                doc_freq[gram] += 1
        return cls(n_images=len(references), doc_freq=dict(doc_freq), max_n=max_n)

    def idf(self, gram) -> float:
        return math.log(self.n_images / max(1.0, self.doc_freq.get(gram, 0)))


def _tfidf_vec(tokens, n, idf: CiderIdf) -> tuple[dict, float]:
    vec = {g: cnt * idf.idf(g) for g, cnt in _ngrams(tokens, n).items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_sentence(cand, refs, idf: CiderIdf, variant: str = "plain",
                   sigma: float = 6.0) -> float:
    """Raw 0-10 consensus score for one candidate against its references."""
    per_n = []
    for n in range(1, idf.max_n + 1):
        cvec, cnorm = _tfidf_vec(cand, n, idf)
        sims = []
        for ref in refs:
            rvec, rnorm = _tfidf_vec(ref, n, idf)
            if cnorm == 0.0 or rnorm == 0.0:
                sims.append(0.0)
                continue
            if variant == "plain":
                dot = sum(v * rvec.get(g, 0.0) for g, v in cvec.items())
                sims.append(dot / (cnorm * rnorm))
            elif variant == "d":
                dot = sum(min(v, rvec.get(g, 0.0)) * rvec.get(g, 0.0)
                          for g, v in cvec.items())
                delta = len(cand) - len(ref)
                damp = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
                sims.append(damp * dot / (cnorm * rnorm))
            else:
                raise ValueError(f"unknown consensus variant {variant!r}")
        per_n.append(sum(sims) / len(sims))
    return 10.0 * sum(per_n) / idf.max_n


def cider(candidates, references, variant: str = "plain",
          reporting_scale: bool = True) -> float:
    """Corpus consensus score; reporting scale is 100x the raw 0-10 value."""
    _check_corpus(candidates, references)
    idf = CiderIdf.from_references(references)
    if idf.n_images == 1:
        warnings.warn("single-image corpus: idf degenerates, score is 0",
                      stacklevel=2)
    raw = sum(cider_sentence(c, r, idf, variant)
              for c, r in zip(candidates, references)) / len(candidates)
    return raw * CIDER_REPORT_SCALE if reporting_scale else raw


# ---------------------------------------------------------------------------
# exact-match METEOR variant
# ---------------------------------------------------------------------------

def _align(cand, ref) -> list[tuple[int, int]]:
    """Greedy left-to-right exact matching of candidate to reference slots."""
    taken = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, rtok in enumerate(ref):
            if not taken[j] and rtok == tok:
                taken[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_lite(candidates, references) -> float:
    """Unigram F-mean (recall-weighted 9:1) with a fragmentation penalty.

    Exact-token alignment only; scores are not comparable to full METEOR.
    """
    _check_corpus(candidates, references)
    total = 0.0
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            pairs = _align(cand, ref)
            m = len(pairs)
            if m == 0:
                continue
            prec = m / len(cand)
            rec = m / len(ref)
            f_mean = 10.0 * prec * rec / (rec + 9.0 * prec)
            chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:])
                             if i1 != i0 + 1 or j1 != j0 + 1)
            penalty = 0.5 * (chunks / m) ** 3
            best = max(best, f_mean * (1.0 - penalty))
        total += best
    return 100.0 * total / len(candidates)


# ---------------------------------------------------------------------------
# aggregate report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    bleu: list[float]            # BLEU-1..4, 0-100
    meteor: float                # 0-100, exact-match variant
    rouge_l: float               # 0-100
    cider: float                 # reporting scale (100x raw)
    spice: float | None          # externally supplied only
    s_m: float
    s_m_star: float | None

    def rows(self) -> list[tuple[str, float]]:
        rows = [(f"BLEU-{i + 1}", v) for i, v in enumerate(self.bleu)]
        rows += [("METEOR-lite", self.meteor), ("ROUGE-L", self.rouge_l),
                 ("CIDEr", self.cider)]
        if self.spice is not None:
            rows.append(("SPICE", self.spice))
        rows.append(("S_m", self.s_m))
        if self.s_m_star is not None:
            rows.append(("S_m*", self.s_m_star))
        return rows


def aggregate(bleu4: float, meteor: float, rouge: float, cider_score: float,
              spice: float | None = None) -> tuple[float, float | None]:
    """Arithmetic means of the component scores on their reporting scales."""
    s_m = (bleu4 + meteor + rouge + cider_score) / 4.0
    s_m_star = None if spice is None \
        else (bleu4 + meteor + rouge + cider_score + spice) / 5.0
    return s_m, s_m_star


def evaluate(candidates, references, spice: float | None = None,
             cider_variant: str = "plain") -> MetricReport:
    """Compute the full metric suite over a tokenized corpus."""
    bleu_scores = bleu(candidates, references)
    meteor = meteor_lite(candidates, references)
    rouge = rouge_l(candidates, references)
    cider_score = cider(candidates, references, variant=cider_variant)
    s_m, s_m_star = aggregate(bleu_scores[3], meteor, rouge, cider_score, spice)
    return MetricReport(bleu=bleu_scores, meteor=meteor, rouge_l=rouge,
                        cider=cider_score, spice=spice, s_m=s_m,
                        s_m_star=s_m_star)


def format_report(report: MetricReport, footer: str = "") -> str:
    """Aligned table plus machine-readable key=value lines."""
    rows = report.rows()
    width = max(len(name) for name, _ in rows)
    lines = ["metric".ljust(width) + "   value", "-" * (width + 10)]
    for name, value in rows:
        lines.append(f"{name.ljust(width)}   {value:10.2f}")
    lines.append("")
    keymap = {"BLEU-1": "bleu1", "BLEU-2": "bleu2", "BLEU-3": "bleu3",
              "BLEU-4": "bleu4", "METEOR-lite": "meteor_lite",
              "ROUGE-L": "rouge_l", "CIDEr": "cider", "SPICE": "spice",
              "S_m": "s_m", "S_m*": "s_m_star"}
    for name, value in rows:
        lines.append(f"{keymap[name]}={value!r}")
    lines.append("")
    lines.append("note: METEOR-lite is an exact-match variant; values are not"
                 " comparable to published METEOR numbers.")
    if footer:
        lines.append(footer)
    return "\n".join(lines) + "\n"
