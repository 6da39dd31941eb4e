"""Atlas-library directory format.

Layout:
    template.nii.gz
    cropbox.json
    scheme.json
    priors/<id>/intensity.nii.gz
    priors/<id>/labels.nii.gz
    priors/<id>/warp_to_template.nii.gz   (optional cache)

Priors are always loaded in sorted id order so downstream results do not
depend on directory listing order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import MissingFile
from .grid import CropBox, LabelScheme, LabelVolume, VolumeGrid


@dataclass
class AtlasPrior:
    id: str
    intensity: VolumeGrid
    labels: LabelVolume
    warp_to_template: object | None = None  # DeformationField


@dataclass
class AtlasLibrary:
    template: VolumeGrid
    crop_box: CropBox
    scheme: LabelScheme
    priors: list = field(default_factory=list)

    def save(self, out_dir):
        from . import imgio

        os.makedirs(out_dir, exist_ok=True)
        imgio.write_volume(self.template, os.path.join(out_dir, "template.nii.gz"))
        with open(os.path.join(out_dir, "cropbox.json"), "w") as f:
            json.dump(self.crop_box.to_dict(), f, indent=2)
        self.scheme.to_json(os.path.join(out_dir, "scheme.json"))
        for p in self.priors:
            pdir = os.path.join(out_dir, "priors", p.id)
            os.makedirs(pdir, exist_ok=True)
            imgio.write_volume(p.intensity, os.path.join(pdir, "intensity.nii.gz"))
            imgio.write_volume(p.labels, os.path.join(pdir, "labels.nii.gz"))
            if p.warp_to_template is not None:
                imgio.write_field(
                    p.warp_to_template, os.path.join(pdir, "warp_to_template.nii.gz")
                )

    @classmethod
    def load(cls, atlas_dir) -> "AtlasLibrary":
        from . import imgio

        tpath = os.path.join(atlas_dir, "template.nii.gz")
        if not os.path.isfile(tpath):
            raise MissingFile(tpath)
        template = imgio.read_volume(tpath)
        with open(os.path.join(atlas_dir, "cropbox.json")) as f:
            box = CropBox.from_dict(json.load(f))
        scheme = LabelScheme.from_json(os.path.join(atlas_dir, "scheme.json"))
        priors = []
        pdir = os.path.join(atlas_dir, "priors")
        if not os.path.isdir(pdir):
            raise MissingFile(pdir)
        for pid in sorted(os.listdir(pdir)):
            sub = os.path.join(pdir, pid)
            if not os.path.isdir(sub):
                continue
            intensity = imgio.read_volume(os.path.join(sub, "intensity.nii.gz"))
            labels = imgio.read_volume(
                os.path.join(sub, "labels.nii.gz"), as_labels=True, scheme=scheme
            )
            warp = None
            wpath = os.path.join(sub, "warp_to_template.nii.gz")
            if os.path.isfile(wpath):
                warp = imgio.read_field(wpath)
            priors.append(AtlasPrior(pid, intensity, labels, warp))
        if not priors:
            raise MissingFile(f"no priors found under {pdir}")
        return cls(template=template, crop_box=box, scheme=scheme, priors=priors)
