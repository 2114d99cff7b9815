#include "fslm/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

namespace fslm {

namespace {
std::atomic<unsigned> g_threads{0};
}

std::uint64_t mix_seed(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index)
{
    return mix_seed(mix_seed(master) ^ (index * 0xd1342543de82ef95ULL + 1));
}

std::uint64_t derive_seed(std::uint64_t master, const std::string& tag)
{
    // FNV-1a over the tag
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return derive_seed(master, h);
}

void set_thread_count(unsigned n) { g_threads = n; }

unsigned thread_count()
{
    unsigned n = g_threads.load();
    if (n == 0)
        n = std::max(1u, std::thread::hardware_concurrency());
    return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body)
{
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(thread_count(), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            body(i);
        return;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers)
                    body(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure)
                    failure = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    if (failure)
        std::rethrow_exception(failure);
}

void check_index_set(const IndexSet& keep, int dim)
{
    if (keep.empty())
        throw ConfigError("feature index set must be nonempty");
    std::vector<bool> seen(static_cast<std::size_t>(dim), false);
    for (int i : keep) {
        if (i < 0 || i >= dim)
            throw ConfigError("feature index " + std::to_string(i) + " out of range [0, " +
                              std::to_string(dim) + ")");
        if (seen[static_cast<std::size_t>(i)])
            throw ConfigError("duplicate feature index " + std::to_string(i));
        seen[static_cast<std::size_t>(i)] = true;
    }
}

IndexSet all_indices(int dim)
{
    IndexSet out(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i)
        out[static_cast<std::size_t>(i)] = i;
    return out;
}

IndexSet complement(const IndexSet& drop, int dim)
{
    IndexSet out;
    for (int i = 0; i < dim; ++i)
        if (std::find(drop.begin(), drop.end(), i) == drop.end())
            out.push_back(i);
    return out;
}

double log_sum_exp(const double* values, int n)
{
    double peak = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i)
        peak = std::max(peak, values[i]);
    if (!std::isfinite(peak))
        return peak;
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
        acc += std::exp(values[i] - peak);
    return peak + std::log(acc);
}

Matrix tanh_activation(const Matrix& x)
{
    const Eigen::ArrayXXd e = (2.0 * x.array().max(-20.0).min(20.0)).exp();
    return (1.0 - 2.0 / (e + 1.0)).matrix();
}

} // namespace fslm
