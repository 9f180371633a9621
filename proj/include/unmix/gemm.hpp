#pragma once

#include <cstddef>
#include <vector>

namespace unmix {

// Small row-major matrix kernels. Layer code parallelizes over the batch, so
// these run single-threaded; loops are ordered for contiguous inner access.

// C[M,N] += A[M,K] * B[K,N]   (C must be pre-zeroed unless accumulating)
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* a_row = A + i * K;
        T* c_row = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            T a = a_row[k];
            if (a == T(0)) continue;
            const T* b_row = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C[M,N] += A^T * B where A is stored [K,M]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t k = 0; k < K; ++k) {
        const T* a_row = A + k * M;
        const T* b_row = B + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            T a = a_row[i];
            if (a == T(0)) continue;
            T* c_row = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C[M,N] += A[M,K] * B^T where B is stored [N,K]. B is transposed into a
// thread-local scratch first; the row-dot formulation is an order of
// magnitude slower because the serial accumulator chain cannot vectorize.
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    static thread_local std::vector<T> scratch;
    if (scratch.size() < K * N) scratch.resize(K * N);
    T* bt = scratch.data();
    for (std::size_t j = 0; j < N; ++j)
        for (std::size_t k = 0; k < K; ++k) bt[k * N + j] = B[j * K + k];
    gemm_nn(M, N, K, A, bt, C);
}

// im2col for one [C,H,W] sample: col is [C*k*k, Ho*Wo].
template <typename T>
void im2col(const T* src, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            T* col) {
    const std::size_t cols = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        const T* plane = src + static_cast<std::size_t>(c) * H * W;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                T* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * cols;
                for (int ho = 0; ho < Ho; ++ho) {
                    int hi = ho * stride - pad + ki;
                    if (hi < 0 || hi >= H) {
                        for (int wo = 0; wo < Wo; ++wo) row[ho * Wo + wo] = T(0);
                        continue;
                    }
                    const T* src_row = plane + static_cast<std::size_t>(hi) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        int wi = wo * stride - pad + kj;
                        row[ho * Wo + wo] = (wi >= 0 && wi < W) ? src_row[wi] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add inverse of im2col: dst is one [C,H,W] sample, accumulated into.
template <typename T>
void col2im(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            T* dst) {
    const std::size_t cols = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        T* plane = dst + static_cast<std::size_t>(c) * H * W;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const T* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * cols;
                for (int ho = 0; ho < Ho; ++ho) {
                    int hi = ho * stride - pad + ki;
                    if (hi < 0 || hi >= H) continue;
                    T* dst_row = plane + static_cast<std::size_t>(hi) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        int wi = wo * stride - pad + kj;
                        if (wi >= 0 && wi < W) dst_row[wi] += row[ho * Wo + wo];
                    }
                }
            }
        }
    }
}

}  // namespace unmix
