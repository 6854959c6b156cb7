"""
Reading and writing NIfTI-1 volumes
====================================

"""

import tempfile
from pathlib import Path

# import numpy: all voxel data lives in plain arrays
import numpy as np

from evcseg.nifti import read_header, read_nifti, write_nifti
from evcseg.volume import Volume

out = Path(tempfile.mkdtemp(prefix="evcseg-demo-"))

# a Volume is data plus a voxel-to-world affine; here 1.5 mm cubic voxels
# with the origin shifted to (-10, 20, 5) millimeters (values kept
# float32-representable, matching the default on-disk type)
rng = np.random.default_rng(0)
affine = np.diag([1.5, 1.5, 1.5, 1.0])
affine[:3, 3] = (-10.0, 20.0, 5.0)
vol = Volume(rng.random((4, 5, 6)).astype(np.float32).astype(np.float64), affine)

# a path ending in .gz selects gzip transparently; the writer fixes the
# gzip timestamp so identical volumes give identical bytes
write_nifti(vol, out / "a.nii.gz")
write_nifti(vol, out / "b.nii.gz")
print("deterministic bytes:", (out / "a.nii.gz").read_bytes() == (out / "b.nii.gz").read_bytes())

# intensities default to float32 on disk; any supported integer or float
# type can be forced instead
write_nifti(Volume(np.arange(24.0).reshape(2, 3, 4)), out / "c.nii", dtype=np.int16)
hdr = read_header(out / "c.nii")
print("on-disk datatype code:", hdr.datatype, " byteswapped:", hdr.byteswapped)

# reading returns float64 data and the affine the file declared
back = read_nifti(out / "a.nii.gz")
print("round trip exact:", np.array_equal(back.data, vol.data))
print("affine preserved:\n", back.affine)
