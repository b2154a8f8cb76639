"""Modalities, task descriptions and the default task roster."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, List, Tuple


class ModalityKind(enum.Enum):
    IMAGE = "image"
    SIGNAL = "signal"
    VITAL_SIGN = "vital_sign"
    LAB_RESULT = "lab_result"
    INPUT_VAR = "input_var"
    OUTPUT_VAR = "output_var"

    @property
    def index(self) -> int:
        return MODALITY_ORDER.index(self)


MODALITY_ORDER: List[ModalityKind] = list(ModalityKind)

# Raw per-sample array shape for each modality.
RAW_SHAPES: Dict[ModalityKind, Tuple[int, ...]] = {
    ModalityKind.IMAGE: (1, 8, 8),        # channels, height, width
    ModalityKind.SIGNAL: (2, 32),         # leads, time steps
    ModalityKind.VITAL_SIGN: (6, 7),      # time window, variables
    ModalityKind.LAB_RESULT: (6, 10),
    ModalityKind.INPUT_VAR: (6, 1),
    ModalityKind.OUTPUT_VAR: (6, 1),
}

MODALITY_TEXT: Dict[ModalityKind, str] = {
    ModalityKind.IMAGE: "radiology image",
    ModalityKind.SIGNAL: "twelve lead ecg signal",
    ModalityKind.VITAL_SIGN: "vital signs",
    ModalityKind.LAB_RESULT: "laboratory test results",
    ModalityKind.INPUT_VAR: "input variables",
    ModalityKind.OUTPUT_VAR: "output variables",
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    modalities: Tuple[ModalityKind, ...]
    prompt_text: str
    num_classes: int = 2
    role: str = "training"  # "training" | "validation"
    modality_description: str = ""

    def __post_init__(self):
        if not self.modalities:
            raise ValueError(f"task {self.name!r} has no modalities")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"task {self.name!r} lists a modality twice")
        if self.num_classes < 2:
            raise ValueError(f"task {self.name!r}: num_classes must be >= 2")
        if self.role not in ("training", "validation"):
            raise ValueError(f"task {self.name!r}: unknown role {self.role!r}")
        if not self.modality_description:
            desc = " and ".join(MODALITY_TEXT[m] for m in self.modalities)
            object.__setattr__(self, "modality_description", desc)

    def with_modalities(self, modalities) -> "TaskSpec":
        return TaskSpec(self.task_id, self.name, tuple(modalities), self.prompt_text,
                        self.num_classes, self.role)


_CLINICAL = (ModalityKind.VITAL_SIGN, ModalityKind.LAB_RESULT,
             ModalityKind.INPUT_VAR, ModalityKind.OUTPUT_VAR)

TRAINING_TASKS: List[TaskSpec] = [
    TaskSpec(0, "lung_opacity", (ModalityKind.IMAGE,),
             "Assess this CT image: should it be classified as lung opacity?"),
    TaskSpec(1, "covid19", (ModalityKind.IMAGE,),
             "Based on this image, is the patient COVID-19 positive?"),
    TaskSpec(2, "ecg_abnormal", (ModalityKind.SIGNAL,),
             "Is the given ECG abnormal?"),
    TaskSpec(3, "mortality", _CLINICAL,
             "Based on these clinical features, will mortality occur in this patient?"),
]

VALIDATION_TASKS: List[TaskSpec] = [
    TaskSpec(4, "enlarged_cardiomediastinum", (ModalityKind.IMAGE,),
             "Does this image show evidence of enlarged cardiomediastinum?", role="validation"),
    TaskSpec(5, "sepsis", _CLINICAL,
             "Based on these clinical features, will sepsis occur in this patient?",
             role="validation"),
]

# validation task -> training task whose feature space it shares
TWIN_OF: Dict[str, str] = {"enlarged_cardiomediastinum": "lung_opacity", "sepsis": "mortality"}

ALL_TASKS: Dict[str, TaskSpec] = {t.name: t for t in TRAINING_TASKS + VALIDATION_TASKS}


def get_task(name: str) -> TaskSpec:
    try:
        return ALL_TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}; known: {sorted(ALL_TASKS)}") from None
