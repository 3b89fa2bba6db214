#pragma once

// Row-major GEMM on top of a Fortran-ABI BLAS. The symbol names and the
// integer width are configurable at build time so that alternative OpenBLAS
// builds (e.g. suffixed ILP64 ones) can be dropped in.

#ifndef SSTN_SGEMM_SYMBOL
#define SSTN_SGEMM_SYMBOL sgemm_
#endif
#ifndef SSTN_DGEMM_SYMBOL
#define SSTN_DGEMM_SYMBOL dgemm_
#endif
#ifndef SSTN_BLAS_INT
#define SSTN_BLAS_INT int
#endif

extern "C" {
void SSTN_SGEMM_SYMBOL(const char* transa, const char* transb,
                       const SSTN_BLAS_INT* m, const SSTN_BLAS_INT* n,
                       const SSTN_BLAS_INT* k, const float* alpha,
                       const float* a, const SSTN_BLAS_INT* lda,
                       const float* b, const SSTN_BLAS_INT* ldb,
                       const float* beta, float* c, const SSTN_BLAS_INT* ldc);
void SSTN_DGEMM_SYMBOL(const char* transa, const char* transb,
                       const SSTN_BLAS_INT* m, const SSTN_BLAS_INT* n,
                       const SSTN_BLAS_INT* k, const double* alpha,
                       const double* a, const SSTN_BLAS_INT* lda,
                       const double* b, const SSTN_BLAS_INT* ldb,
                       const double* beta, double* c, const SSTN_BLAS_INT* ldc);
}

namespace sstn::detail {

inline void blas_gemm(const char* ta, const char* tb, SSTN_BLAS_INT m,
                      SSTN_BLAS_INT n, SSTN_BLAS_INT k, float alpha,
                      const float* a, SSTN_BLAS_INT lda, const float* b,
                      SSTN_BLAS_INT ldb, float beta, float* c,
                      SSTN_BLAS_INT ldc) {
  SSTN_SGEMM_SYMBOL(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc);
}

inline void blas_gemm(const char* ta, const char* tb, SSTN_BLAS_INT m,
                      SSTN_BLAS_INT n, SSTN_BLAS_INT k, double alpha,
                      const double* a, SSTN_BLAS_INT lda, const double* b,
                      SSTN_BLAS_INT ldb, double beta, double* c,
                      SSTN_BLAS_INT ldc) {
  SSTN_DGEMM_SYMBOL(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc);
}

// C[m x n] = alpha * op(A)[m x k] * op(B)[k x n] + beta * C, all row-major.
// Implemented on the column-major BLAS by computing C^T = op(B)^T op(A)^T.
template <typename S>
void gemm(bool trans_a, bool trans_b, long m, long n, long k, S alpha,
          const S* a, long lda, const S* b, long ldb, S beta, S* c, long ldc) {
  blas_gemm(trans_b ? "T" : "N", trans_a ? "T" : "N",
            static_cast<SSTN_BLAS_INT>(n), static_cast<SSTN_BLAS_INT>(m),
            static_cast<SSTN_BLAS_INT>(k), alpha, b,
            static_cast<SSTN_BLAS_INT>(ldb), a, static_cast<SSTN_BLAS_INT>(lda),
            beta, c, static_cast<SSTN_BLAS_INT>(ldc));
}

}  // namespace sstn::detail
