"""Clinical-flavored synthetic datasets.

These stand in for credentialed corpora. Every generator is a pure
function of ``(kind, size, seed, profile, options)``.

The QA generator writes medication-list records of the form
``<section> medication : <drug> <dose> mg .`` into filler narrative; the
question names one section and the answer is that record's
``<drug> <dose> mg``. With ``long_range=True`` every record (target and
distractors) sits at least ``min_answer_words`` words into the context, so
the answer is only reachable by a model that reads past that point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import NLI_LABELS, TaskExample


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class VocabularyProfile:
    subjects: tuple[str, ...]
    verbs: tuple[str, ...]
    states: tuple[str, ...]
    times: tuple[str, ...]
    findings: tuple[str, ...]
    labs: tuple[str, ...]
    services: tuple[str, ...]
    sections: tuple[str, ...]
    drugs: tuple[str, ...]
    doses: tuple[str, ...]
    problems: tuple[str, ...]
    treatments: tuple[str, ...]
    tests: tuple[str, ...]
    cxr_findings: tuple[str, ...]
    topic_markers: tuple[str, ...]
    aki_marker: str


CLINICAL = VocabularyProfile(
    subjects=("patient", "pt", "the patient", "she", "he"),
    verbs=("remained", "was", "appeared", "continued to be", "became", "is"),
    states=("stable", "afebrile", "hemodynamically stable", "comfortable",
            "alert and oriented", "tachycardic", "hypotensive", "nauseous",
            "ambulatory", "somnolent", "anxious", "euvolemic"),
    times=("overnight", "this morning", "on day 2", "per nursing", "at rest",
           "since admission", "on exam", "today", "this evening", "on rounds"),
    findings=("lungs clear to auscultation bilaterally", "abdomen soft non tender",
              "no acute distress", "heart regular rate and rhythm",
              "extremities without edema", "skin warm and dry", "neuro exam nonfocal",
              "good air entry", "bowel sounds present"),
    labs=("sodium", "potassium", "creatinine", "hemoglobin", "wbc", "lactate",
          "glucose", "platelets", "bicarbonate", "troponin"),
    services=("cardiology", "nephrology", "pulmonary", "surgery", "social work",
              "physical therapy", "neurology", "case management"),
    sections=("admission", "discharge", "home", "transfer", "outpatient"),
    drugs=("aspirin", "metoprolol", "lisinopril", "atorvastatin", "furosemide",
           "warfarin", "metformin", "amlodipine", "omeprazole", "gabapentin",
           "levothyroxine", "prednisone", "sertraline", "tamsulosin", "allopurinol",
           "carvedilol", "spironolactone", "losartan", "simvastatin", "clopidogrel"),
    doses=("5", "10", "20", "25", "40", "50", "81", "100", "125", "200", "250",
           "300", "400", "500", "625", "750", "1000"),
    problems=("chest pain", "shortness of breath", "pneumonia", "acute kidney injury",
              "atrial fibrillation", "hypertension", "diabetes mellitus", "cellulitis",
              "anemia", "urinary tract infection", "sepsis", "copd exacerbation"),
    treatments=("aspirin", "metoprolol", "iv fluids", "lasix", "vancomycin", "insulin",
                "heparin drip", "albuterol nebs", "ceftriaxone", "oxygen therapy"),
    tests=("chest x-ray", "ct scan", "echocardiogram", "blood cultures", "ekg",
           "urinalysis", "cbc", "basic metabolic panel", "abdominal ultrasound"),
    cxr_findings=("cardiomegaly", "edema", "consolidation", "pneumonia", "atelectasis",
                  "pneumothorax", "pleural effusion"),
    topic_markers=("myocardial", "valvular", "arrhythmia", "hypertensive", "vascular",
                   "pericardial", "congenital", "cardiomyopathy", "coronary",
                   "thrombosis", "aneurysm", "endocarditis"),
    aki_marker="oliguria",
)

PROFILES = {"clinical": CLINICAL}


class _Writer:
    """Filler narrative drawn from a profile with one RNG."""

    def __init__(self, profile: VocabularyProfile, rng: np.random.Generator):
        self.p = profile
        self.rng = rng

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def sentence(self) -> str:
        p, r = self.p, int(self.rng.integers(5))
        if r == 0:
            return f"{self.pick(p.subjects)} {self.pick(p.verbs)} {self.pick(p.states)} {self.pick(p.times)} ."
        if r == 1:
            return f"{self.pick(p.findings)} ."
        if r == 2:
            return f"labs notable for {self.pick(p.labs)} of {int(self.rng.integers(1, 200))} ."
        if r == 3:
            return f"will follow up with {self.pick(p.services)} {self.pick(p.times)} ."
        return f"repeat {self.pick(p.labs)} {self.pick(p.times)} and continue to monitor ."

    def words(self, count: int) -> list[str]:
        out: list[str] = []
        while len(out) < count:
            out.extend(self.sentence().split())
        return out


def _raw_note(w: _Writer, n_sentences: int) -> str:
    """An unnormalized note: placeholders, mixed case, tabs, odd characters."""
    p, rng = w.p, w.rng
    parts = []
    for _ in range(n_sentences):
        r = int(rng.integers(6))
        if r == 0:
            parts.append(f"[**Known lastname {int(rng.integers(100, 9999))}**] seen")
        elif r == 1:
            parts.append(f"Admitted [**2101-{int(rng.integers(1, 13))}-{int(rng.integers(1, 29))}**].")
        elif r == 2:
            s, d, dose = w.pick(p.sections), w.pick(p.drugs), w.pick(p.doses)
            parts.append(f"{s.upper()} medication: {d.capitalize()} {dose} mg.")
        elif r == 3:
            parts.append(f"BP {int(rng.integers(90, 180))}/{int(rng.integers(50, 100))},"
                         f"\tT {int(rng.integers(96, 103))}°F")
        else:
            parts.append(w.sentence().capitalize())
    return "  ".join(parts)


def _qa(w: _Writer, idx: int, long_range: bool, min_answer_words: int,
        distractors: int, context_words: int) -> TaskExample:
    p, rng = w.p, w.rng
    n_rec = min(1 + distractors, len(p.sections))
    secs = [p.sections[i] for i in rng.permutation(len(p.sections))[:n_rec]]
    target = secs[0]
    drugs = [p.drugs[i] for i in rng.permutation(len(p.drugs))[:n_rec]]
    records = [f"{s} medication : {d} {w.pick(p.doses)} mg ." for s, d in zip(secs, drugs)]
    order = rng.permutation(n_rec)
    if long_range:
        lead = min_answer_words + int(rng.integers(0, 40))
    else:
        lead = int(rng.integers(0, max(1, context_words // 2)))
    words = w.words(lead)[:lead]
    answer_start = answer_end = -1
    for j in order:
        words.extend(w.words(int(rng.integers(0, 12))) if words else [])
        cut = len(" ".join(words)) + (1 if words else 0)
        if j == 0:
            rec_words = records[j].split()
            head = " ".join(rec_words[:3]) + " "   # "<section> medication : "
            answer_text = " ".join(rec_words[3:6])
            answer_start = cut + len(head)
            answer_end = answer_start + len(answer_text)
        words.extend(records[j].split())
    tail = max(0, context_words - len(words))
    words.extend(w.words(tail)[:tail])
    context = " ".join(words)
    ex = TaskExample("qa", id=f"qa-{idx}", context=context,
                     question=f"what is the {target} medication ?",
                     answer_start=answer_start, answer_end=answer_end,
                     answer_text=context[answer_start:answer_end])
    return ex


def _ner(w: _Writer, idx: int, n_sentences: int) -> TaskExample:
    p, rng = w.p, w.rng
    tokens: list[str] = []
    tags: list[str] = []

    def filler(text):
        for t in text.split():
            tokens.append(t)
            tags.append("O")

    def entity(text, typ):
        for i, t in enumerate(text.split()):
            tokens.append(t)
            tags.append(("B-" if i == 0 else "I-") + typ)

    for _ in range(n_sentences):
        r = int(rng.integers(5))
        if r == 0:
            filler("patient presented with")
            entity(w.pick(p.problems), "PROBLEM")
        elif r == 1:
            entity(w.pick(p.tests), "TEST")
            filler("showed")
            entity(w.pick(p.problems), "PROBLEM")
        elif r == 2:
            filler("started on")
            entity(w.pick(p.treatments), "TREATMENT")
            filler("for")
            entity(w.pick(p.problems), "PROBLEM")
        elif r == 3:
            entity(w.pick(p.tests), "TEST")
            filler("was unremarkable")
        else:
            filler(w.sentence()[:-2])
        filler(".")
    return TaskExample("ner", id=f"ner-{idx}", tokens=tokens, tags=tags)


def _doc_cls(w: _Writer, idx: int, num_classes: int, multilabel: bool,
             doc_words: int) -> TaskExample:
    p, rng = w.p, w.rng
    words = w.words(doc_words)[:doc_words]
    if multilabel:
        if num_classes > len(p.cxr_findings):
            raise GenerationError(f"profile supports at most {len(p.cxr_findings)} findings")
        present = [c for c in range(num_classes) if rng.random() < 0.3]
        if not present:
            present = [int(rng.integers(num_classes))]
        for c in present:
            pos = int(rng.integers(0, len(words) + 1))
            words[pos:pos] = f"there is {p.cxr_findings[c]}".split()
        labels = tuple(present)
    elif num_classes == 2:
        label = int(rng.integers(2))
        if label:
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, p.aki_marker)
        labels = (label,)
    else:
        if num_classes > len(p.topic_markers):
            raise GenerationError(f"profile supports at most {len(p.topic_markers)} classes")
        label = int(rng.integers(num_classes))
        for _ in range(int(rng.integers(1, 3))):
            words.insert(int(rng.integers(0, len(words) + 1)), p.topic_markers[label])
        labels = (label,)
    return TaskExample("doc-cls", id=f"cls-{idx}", text=" ".join(words), labels=labels)


def _pair(w: _Writer, idx: int) -> TaskExample:
    p, rng = w.p, w.rng
    prob, treat = w.pick(p.problems), w.pick(p.treatments)
    premise = f"patient has {prob} and was started on {treat} ."
    label = NLI_LABELS[int(rng.integers(3))]
    if label == "entailment":
        hyp = f"patient has {prob} ." if rng.random() < 0.5 else f"patient is on {treat} ."
    elif label == "contradiction":
        hyp = (f"patient does not have {prob} ." if rng.random() < 0.5
               else f"patient was never given {treat} .")
    else:
        other = w.pick([x for x in p.problems if x != prob])
        hyp = f"patient has a family history of {other} ."
    return TaskExample("pair-cls", id=f"nli-{idx}", premise=premise, hypothesis=hyp, label=label)


def gen_synthetic(kind: str, size: int, seed: int = 0, profile: str = "clinical", *,
                  long_range: bool = False, min_answer_words: int = 520,
                  distractors: int = 2, context_words: int = 200,
                  sample_fraction: float = 1.0, num_classes: int = 2,
                  multilabel: bool = False, doc_words: int = 120,
                  sentences: int = 8) -> list[TaskExample]:
    """Generate ``size`` examples of ``kind`` (deterministic per seed).

    ``sample_fraction`` under-samples QA training sets. ``doc_words`` sizes
    classification documents, ``sentences`` NER documents and raw notes.
    """
    if size < 1:
        raise GenerationError("size must be >= 1")
    if profile not in PROFILES:
        raise GenerationError(f"unknown vocabulary profile {profile!r}")
    if not 0.0 < sample_fraction <= 1.0:
        raise GenerationError("sample_fraction must be in (0, 1]")
    rng = np.random.default_rng([seed, 0x5EED])
    w = _Writer(PROFILES[profile], rng)
    out: list[TaskExample]
    if kind == "mlm-text":
        out = [TaskExample("mlm-text", id=f"note-{i}", text=_raw_note(w, sentences))
               for i in range(size)]
    elif kind == "qa":
        out = [_qa(w, i, long_range, min_answer_words, distractors, context_words)
               for i in range(size)]
        if sample_fraction < 1.0:
            keep = max(1, math.ceil(sample_fraction * size))
            chosen = np.sort(rng.permutation(size)[:keep])
            out = [out[i] for i in chosen]
    elif kind == "ner":
        out = [_ner(w, i, sentences) for i in range(size)]
    elif kind == "doc-cls":
        out = [_doc_cls(w, i, num_classes, multilabel, doc_words) for i in range(size)]
    elif kind == "pair-cls":
        out = [_pair(w, i) for i in range(size)]
    else:
        raise GenerationError(f"unknown kind {kind!r}")
    return [ex.validate() for ex in out]
