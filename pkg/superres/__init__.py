"""
One-step diffusion super-resolution with dynamic time-step selection and
open-world multi-modality supervision.
"""
