# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Stride-1 3D convolution on zero-padded flat planes.

float32 goes to the register-blocked C core in ``conv_f32.h``; float64
(gradient checking only) runs plain loops. Rows carry ``Xp - Xo`` junk
columns that the caller slices off; gradient rows must be zero there.
Every output element is owned by one thread, so results do not depend on
the thread count.
"""
from cython.parallel cimport prange
from libc.string cimport memset

cdef extern from "conv_f32.h":
    int SLACK
    void conv3d_s1_fwd_f32(const float *xp, const float *w, float *out,
                           Py_ssize_t B, Py_ssize_t C, Py_ssize_t Zp, Py_ssize_t Yp, Py_ssize_t Xp,
                           Py_ssize_t O, Py_ssize_t KZ, Py_ssize_t KY, Py_ssize_t KX,
                           Py_ssize_t Zo, Py_ssize_t Yo, Py_ssize_t d, Py_ssize_t n,
                           int nthreads) nogil
    void conv3d_s1_wgrad_f32(const float *xp, const float *gout, float *gw,
                             Py_ssize_t B, Py_ssize_t C, Py_ssize_t Zp, Py_ssize_t Yp, Py_ssize_t Xp,
                             Py_ssize_t O, Py_ssize_t KZ, Py_ssize_t KY, Py_ssize_t KX,
                             Py_ssize_t Zo, Py_ssize_t Yo, Py_ssize_t d, int nthreads) nogil

ctypedef fused real:
    float
    double

SLACK_ELEMS = SLACK


def forward(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] w,
            real[:, :, :, :, ::1] out, int dilation, int num_threads=1):
    """``out`` has padded row width Xp; ``xp`` must be followed by SLACK zeros."""
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], Zp = xp.shape[2]
    cdef Py_ssize_t Yp = xp.shape[3], Xp = xp.shape[4]
    cdef Py_ssize_t O = w.shape[0], KZ = w.shape[2], KY = w.shape[3], KX = w.shape[4]
    cdef Py_ssize_t Zo = out.shape[2], Yo = out.shape[3]
    cdef Py_ssize_t d = dilation
    cdef Py_ssize_t n = (Yo - 1) * Xp + (Xp - (KX - 1) * d)
    cdef Py_ssize_t bo, b, o, c, z, kz, ky, kx, j, shift
    cdef real wv
    cdef real* acc
    cdef real* src
    if real is float:
        with nogil:
            conv3d_s1_fwd_f32(&xp[0, 0, 0, 0, 0], &w[0, 0, 0, 0, 0], &out[0, 0, 0, 0, 0],
                              B, C, Zp, Yp, Xp, O, KZ, KY, KX, Zo, Yo, d, n, num_threads)
        return
    for bo in prange(B * O, nogil=True, num_threads=num_threads, schedule='static'):
        b = bo // O
        o = bo % O
        for z in range(Zo):
            acc = &out[b, o, z, 0, 0]
            memset(acc, 0, Yo * Xp * sizeof(real))
            for c in range(C):
                for kz in range(KZ):
                    for ky in range(KY):
                        for kx in range(KX):
                            wv = w[o, c, kz, ky, kx]
                            shift = ky * d * Xp + kx * d
                            src = &xp[b, c, z + kz * d, 0, 0]
                            for j in range(n):
                                acc[j] = acc[j] + wv * src[j + shift]


def backward_weight(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] gout,
                    real[:, :, :, :, ::1] gw, int dilation, int num_threads=1):
    """Weight gradient summed over the batch (``gw`` is overwritten)."""
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], Zp = xp.shape[2]
    cdef Py_ssize_t Yp = xp.shape[3], Xp = xp.shape[4]
    cdef Py_ssize_t O = gw.shape[0], KZ = gw.shape[2], KY = gw.shape[3], KX = gw.shape[4]
    cdef Py_ssize_t Zo = gout.shape[2], Yo = gout.shape[3]
    cdef Py_ssize_t d = dilation
    cdef Py_ssize_t n = (Yo - 1) * Xp + (Xp - (KX - 1) * d)
    cdef Py_ssize_t oc, o, c, b, z, kz, ky, kx, j, shift
    cdef real tot
    cdef real* g
    cdef real* src
    if real is float:
        with nogil:
            conv3d_s1_wgrad_f32(&xp[0, 0, 0, 0, 0], &gout[0, 0, 0, 0, 0], &gw[0, 0, 0, 0, 0],
                                B, C, Zp, Yp, Xp, O, KZ, KY, KX, Zo, Yo, d, num_threads)
        return
    for oc in prange(O * C, nogil=True, num_threads=num_threads, schedule='static'):
        o = oc // C
        c = oc % C
        for kz in range(KZ):
            for ky in range(KY):
                for kx in range(KX):
                    shift = ky * d * Xp + kx * d
                    tot = 0
                    for b in range(B):
                        for z in range(Zo):
                            g = &gout[b, o, z, 0, 0]
                            src = &xp[b, c, z + kz * d, 0, 0]
                            for j in range(n):
                                tot = tot + g[j] * src[j + shift]
                    gw[o, c, kz, ky, kx] = tot
