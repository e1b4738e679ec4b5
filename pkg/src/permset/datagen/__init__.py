from .captcha import (CaptchaConfig, CaptchaError, CaptchaInstance, DigitPool, gen_captcha,
                      subset_sum_solutions, unique_solution)
from .dataset import (DatasetError, Sample, SampleAnnotation, generate_captchas, generate_shapes,
                      load_arrays, read_dataset, write_dataset)
from .idx import IDXError, load_idx, read_idx, write_idx
from .pnm import read_pnm, write_pnm
from .shapes import ShapeSceneConfig, gen_shape_scene

__all__ = [
    "CaptchaConfig", "CaptchaError", "CaptchaInstance", "DigitPool", "gen_captcha", "subset_sum_solutions",
    "unique_solution", "DatasetError", "Sample", "SampleAnnotation", "generate_captchas", "generate_shapes",
    "load_arrays", "read_dataset", "write_dataset", "IDXError", "load_idx", "read_idx", "write_idx",
    "read_pnm", "write_pnm", "ShapeSceneConfig", "gen_shape_scene",
]
