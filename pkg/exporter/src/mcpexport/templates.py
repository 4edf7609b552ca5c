"""Prompt templates. Each template contains a {CLASS} placeholder that is
replaced by the class name (subdirectory name with underscores spaced)."""

from __future__ import annotations

DEFAULT_TEMPLATES = ["a photo of a {CLASS}."]

# hand-crafted per-domain templates
DATASET_TEMPLATES: dict[str, list[str]] = {
    "caltech101": ["a photo of a {CLASS}."],
    "dtd": ["{CLASS} texture."],
    "eurosat": ["a centered satellite photo of {CLASS}."],
    "fgvc_aircraft": ["a photo of a {CLASS}, a type of aircraft."],
    "flowers102": ["a photo of a {CLASS}, a type of flower."],
    "food101": ["a photo of {CLASS}, a type of food."],
    "oxford_pets": ["a photo of a {CLASS}, a type of pet."],
    "stanford_cars": ["a photo of a {CLASS}."],
    "sun397": ["a photo of a {CLASS}."],
    "ucf101": ["a photo of a person doing {CLASS}."],
    "imagenet": [
        "itap of a {CLASS}.",
        "a bad photo of the {CLASS}.",
        "a origami {CLASS}.",
        "a photo of the large {CLASS}.",
        "a {CLASS} in a video game.",
        "art of the {CLASS}.",
        "a photo of the small {CLASS}.",
    ],
}


def apply_template(template: str, class_name: str) -> str:
    if "{CLASS}" not in template:
        raise ValueError(f"template {template!r} lacks a {{CLASS}} placeholder")
    return template.replace("{CLASS}", class_name.replace("_", " "))


def load_templates(path: str) -> list[str]:
    """One template per line; blank lines and # comments ignored."""
    templates = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                templates.append(stripped)
    if not templates:
        raise ValueError(f"no templates found in {path}")
    return templates
