/* Selective-scan recurrence on raw contiguous buffers.
 *
 * Shapes: x, delta, y (nb, L, D); A (D, N); B, C (nb, L, N); h (nb, D, N);
 * states (nb, L, D, N) when store != 0.
 *
 * expm1 is evaluated with a branch-free range reduction so the loop over the
 * state dimension vectorizes; exp(z) is taken as 1 + expm1(z).
 */
#ifndef STREAMSSM_SCAN_CORE_H
#define STREAMSSM_SCAN_CORE_H

#include <math.h>
#include <stdint.h>
#include <string.h>

#define SSM_LN2_HI 6.93147180369123816490e-01
#define SSM_LN2_LO 1.90821492927058770002e-10
#define SSM_INV_LN2 1.44269504088896338700e+00
#define SSM_SMALL_Z 1e-6

/* Round-to-nearest and 2^k without libm calls or int conversions: adding
 * 1.5 * 2^(mantissa bits) parks the integer in the low mantissa bits. Valid
 * for the clamped ranges used below. */
#define SSM_RND_D 6755399441055744.0
#define SSM_RND_F 12582912.0f

static inline double ssm_pow2_d(double k) {
    double biased = k + (1023.0 + SSM_RND_D);
    int64_t bits;
    memcpy(&bits, &biased, sizeof bits);
    bits <<= 52;
    double out;
    memcpy(&out, &bits, sizeof out);
    return out;
}

static inline float ssm_pow2_f(float k) {
    float biased = k + (127.0f + SSM_RND_F);
    int32_t bits;
    memcpy(&bits, &biased, sizeof bits);
    bits <<= 23;
    float out;
    memcpy(&out, &bits, sizeof out);
    return out;
}

static inline double ssm_expm1_d(double z) {
    z = z < -700.0 ? -700.0 : z;
    z = z > 700.0 ? 700.0 : z;
    double k = (z * SSM_INV_LN2 + SSM_RND_D) - SSM_RND_D;
    double r = (z - k * SSM_LN2_HI) - k * SSM_LN2_LO;
    /* expm1(r), |r| <= 0.347, Taylor to degree 13 */
    double p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = r + r * r * p;
    double s = ssm_pow2_d(k);
    return s * p + (s - 1.0);
}

static inline float ssm_expm1_f(float z) {
    z = z < -87.0f ? -87.0f : z;
    z = z > 87.0f ? 87.0f : z;
    float k = (z * (float)SSM_INV_LN2 + SSM_RND_F) - SSM_RND_F;
    float r = (z - k * 0.693145751953125f) - k * 1.428606765330187045e-06f;
    float p = 1.0f / 40320.0f;
    p = p * r + 1.0f / 5040.0f;
    p = p * r + 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    p = r + r * r * p;
    float s = ssm_pow2_f(k);
    return s * p + (s - 1.0f);
}

/* One (batch, time, channel) update across the state dimension; branch-free
 * so the loop vectorizes. Returns <C_t, h_t>. */
#define SSM_DEFINE_ROW(NAME, T, EXPM1, FABS)                                           \
static inline T NAME(T dt, T dtx, const T *restrict Ad, const T *restrict Bt,          \
                     const T *restrict Ct, T *restrict hd, Py_ssize_t N) {             \
    for (Py_ssize_t n = 0; n < N; ++n) {                                               \
        T z = dt * Ad[n];                                                              \
        T em1 = EXPM1(z);                                                              \
        int small = FABS(z) < (T)SSM_SMALL_Z;                                          \
        T zs = small ? (T)1 : z;                                                       \
        T series = (T)1 + z * ((T)0.5 + z / (T)6);                                     \
        T ratio = em1 / zs;                                                            \
        T phi = small ? series : ratio;                                                \
        hd[n] = ((T)1 + em1) * hd[n] + dtx * phi * Bt[n];                              \
    }                                                                                  \
    T acc = 0;                                                                         \
    for (Py_ssize_t n = 0; n < N; ++n)                                                 \
        acc += hd[n] * Ct[n];                                                          \
    return acc;                                                                        \
}

SSM_DEFINE_ROW(ssm_row_f32, float, ssm_expm1_f, fabsf)
SSM_DEFINE_ROW(ssm_row_f64, double, ssm_expm1_d, fabs)

#define SSM_DEFINE_SCAN(NAME, T, ROW)                                                  \
static int NAME(const T *x, const T *delta, const T *A, const T *B, const T *C,        \
                T *h, T *y, T *states, int store,                                      \
                Py_ssize_t nb, Py_ssize_t L, Py_ssize_t D, Py_ssize_t N) {             \
    for (Py_ssize_t b = 0; b < nb; ++b) {                                              \
        for (Py_ssize_t t = 0; t < L; ++t) {                                           \
            const Py_ssize_t bt = b * L + t;                                           \
            for (Py_ssize_t d = 0; d < D; ++d) {                                       \
                const T dt = delta[bt * D + d];                                        \
                T *hd = h + (b * D + d) * N;                                           \
                y[bt * D + d] = ROW(dt, dt * x[bt * D + d], A + d * N, B + bt * N,     \
                                    C + bt * N, hd, N);                                \
                if (store)                                                             \
                    memcpy(states + (bt * D + d) * N, hd, sizeof(T) * (size_t)N);      \
            }                                                                          \
        }                                                                              \
    }                                                                                  \
    return 0;                                                                          \
}

SSM_DEFINE_SCAN(ssm_scan_f32, float, ssm_row_f32)
SSM_DEFINE_SCAN(ssm_scan_f64, double, ssm_row_f64)

#endif
