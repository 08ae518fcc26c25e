"""Paired-sequence transformer pretraining (NTP + MBM) and same-genre finetuning
on fMRI voxel timeseries, in numpy."""

__version__ = "0.1.0"
