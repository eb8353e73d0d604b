/* Register-blocked stride-1 3D convolution for float32.
 *
 * Planes are flat rows of length Yp*Xp (padded width Xp). Inputs must be
 * followed by at least SLACK zeroed floats so block over-reads stay in
 * bounds. Output-channel blocks of OB and j-blocks of NV vectors are held
 * in registers across the whole (c, tap) reduction.
 */
#ifndef ADIPOSEG_CONV_F32_H
#define ADIPOSEG_CONV_F32_H

#include <string.h>
#include <stddef.h>

#define VL 16
#define SLACK 256
#define OB 4
#define NV 4

typedef float vf __attribute__((vector_size(VL * sizeof(float))));
typedef float vfu __attribute__((vector_size(VL * sizeof(float)), aligned(4)));

static inline vf ld(const float *p) { return *(const vfu *)p; }
static inline void st(float *p, vf v) { *(vfu *)p = v; }
static inline vf bc(float s) { vf v = {0}; return v + s; }

/* out[b, o, z, :n] = sum_c sum_tap w[o, c, tap] * xp[b, c, z + kz*d, shift + :n] */
static void conv3d_s1_fwd_f32(const float *xp, const float *w, float *out,
                              ptrdiff_t B, ptrdiff_t C, ptrdiff_t Zp, ptrdiff_t Yp, ptrdiff_t Xp,
                              ptrdiff_t O, ptrdiff_t KZ, ptrdiff_t KY, ptrdiff_t KX,
                              ptrdiff_t Zo, ptrdiff_t Yo, ptrdiff_t d, ptrdiff_t n, int nthreads)
{
    const ptrdiff_t plane_in = Yp * Xp, plane_out = Yo * Xp, K = KZ * KY * KX;
    const ptrdiff_t nob = (O + OB - 1) / OB;
    const ptrdiff_t jb = VL * NV;
    ptrdiff_t task;
#pragma omp parallel for num_threads(nthreads) schedule(static)
    for (task = 0; task < B * Zo * nob; ++task) {
        ptrdiff_t b = task / (Zo * nob), rem = task % (Zo * nob);
        ptrdiff_t z = rem / nob, o0 = (rem % nob) * OB;
        ptrdiff_t nob_here = (O - o0) < OB ? (O - o0) : OB;
        float wbuf[OB];
        float tmp[OB][VL * NV];
        for (ptrdiff_t j0 = 0; j0 < n; j0 += jb) {
            vf acc[OB][NV];
            for (int a = 0; a < OB; ++a)
                for (int v = 0; v < NV; ++v)
                    acc[a][v] = bc(0.0f);
            for (ptrdiff_t c = 0; c < C; ++c) {
                const float *xc = xp + (b * C + c) * Zp * plane_in;
                for (ptrdiff_t kz = 0; kz < KZ; ++kz) {
                    const float *xz = xc + (z + kz * d) * plane_in + j0;
                    for (ptrdiff_t ky = 0; ky < KY; ++ky) {
                        for (ptrdiff_t kx = 0; kx < KX; ++kx) {
                            ptrdiff_t k = (kz * KY + ky) * KX + kx;
                            const float *s = xz + ky * d * Xp + kx * d;
                            for (int a = 0; a < OB; ++a)
                                wbuf[a] = a < nob_here ? w[((o0 + a) * C + c) * K + k] : 0.0f;
                            vf sv[NV];
                            for (int v = 0; v < NV; ++v)
                                sv[v] = ld(s + v * VL);
                            for (int a = 0; a < OB; ++a) {
                                vf wv = bc(wbuf[a]);
                                for (int v = 0; v < NV; ++v)
                                    acc[a][v] += wv * sv[v];
                            }
                        }
                    }
                }
            }
            ptrdiff_t cnt = n - j0 < jb ? n - j0 : jb;
            for (int a = 0; a < nob_here; ++a) {
                float *dst = out + ((b * O + o0 + a) * Zo + z) * plane_out + j0;
                if (cnt == jb) {
                    for (int v = 0; v < NV; ++v)
                        st(dst + v * VL, acc[a][v]);
                } else {
                    for (int v = 0; v < NV; ++v)
                        st(&tmp[a][v * VL], acc[a][v]);
                    memcpy(dst, tmp[a], cnt * sizeof(float));
                }
            }
        }
    }
}

#define WB 2

/* gw[o, c, tap] = sum_b sum_z sum_j gout[b, o, z, j] * xp[b, c, z + kz*d, j + shift]
 * gout rows carry zeros in the junk columns; j runs over whole planes. */
static void conv3d_s1_wgrad_f32(const float *xp, const float *gout, float *gw,
                                ptrdiff_t B, ptrdiff_t C, ptrdiff_t Zp, ptrdiff_t Yp, ptrdiff_t Xp,
                                ptrdiff_t O, ptrdiff_t KZ, ptrdiff_t KY, ptrdiff_t KX,
                                ptrdiff_t Zo, ptrdiff_t Yo, ptrdiff_t d, int nthreads)
{
    const ptrdiff_t plane_in = Yp * Xp, plane_out = Yo * Xp, K = KZ * KY * KX;
    const ptrdiff_t KYX = KY * KX;
    const ptrdiff_t nob = (O + WB - 1) / WB;
    const ptrdiff_t nfull = (plane_out / VL) * VL;
    ptrdiff_t task;
#pragma omp parallel for num_threads(nthreads) schedule(static)
    for (task = 0; task < nob * C; ++task) {
        ptrdiff_t o0 = (task / C) * WB, c = task % C;
        ptrdiff_t nb = (O - o0) < WB ? (O - o0) : WB;
        for (ptrdiff_t kz = 0; kz < KZ; ++kz) {
            /* per-tap accumulators for WB output channels; KYX <= 9 for 3x3 taps */
            double tot[WB][64];
            for (int a = 0; a < WB; ++a)
                for (int t = 0; t < KYX; ++t)
                    tot[a][t] = 0.0;
            for (ptrdiff_t b = 0; b < B; ++b) {
                for (ptrdiff_t z = 0; z < Zo; ++z) {
                    const float *src = xp + ((b * C + c) * Zp + z + kz * d) * plane_in;
                    const float *g0 = gout + ((b * O + o0) * Zo + z) * plane_out;
                    const float *g1 = nb > 1 ? g0 + Zo * plane_out : g0;
                    for (ptrdiff_t t = 0; t < KYX; ++t) {
                        ptrdiff_t shift = (t / KX) * d * Xp + (t % KX) * d;
                        const float *s = src + shift;
                        vf a0 = bc(0.0f), a1 = bc(0.0f), c0 = bc(0.0f), c1 = bc(0.0f);
                        ptrdiff_t j = 0;
                        for (; j + 2 * VL <= nfull; j += 2 * VL) {
                            vf s0 = ld(s + j), s1 = ld(s + j + VL);
                            a0 += ld(g0 + j) * s0;
                            a1 += ld(g0 + j + VL) * s1;
                            c0 += ld(g1 + j) * s0;
                            c1 += ld(g1 + j + VL) * s1;
                        }
                        for (; j + VL <= nfull; j += VL) {
                            vf s0 = ld(s + j);
                            a0 += ld(g0 + j) * s0;
                            c0 += ld(g1 + j) * s0;
                        }
                        float r0 = 0.0f, r1 = 0.0f;
                        vf sa = a0 + a1, sc = c0 + c1;
                        for (int l = 0; l < VL; ++l) {
                            r0 += sa[l];
                            r1 += sc[l];
                        }
                        for (; j < plane_out; ++j) {
                            r0 += g0[j] * s[j];
                            r1 += g1[j] * s[j];
                        }
                        tot[0][t] += r0;
                        tot[1][t] += r1;
                    }
                }
            }
            for (int a = 0; a < nb; ++a)
                for (ptrdiff_t t = 0; t < KYX; ++t)
                    gw[((o0 + a) * C + c) * K + kz * KYX + t] = (float)tot[a][t];
        }
    }
}

#endif
