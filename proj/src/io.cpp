#include "fslm/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fslm {

static_assert(std::endian::native == std::endian::little, "matrix files assume a little-endian host");

namespace {

constexpr const char* kThetaPrefix = "theta:";
constexpr const char* kFeaturePrefix = "x:";
constexpr const char* kValidColumn = "valid";

template <class T>
void put(std::string& out, T value)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t& offset)
{
    if (offset + sizeof(T) > in.size())
        throw FormatError("matrix file truncated");
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    offset += sizeof(T);
    return value;
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

} // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& path)
{
    return std::filesystem::path(path.string() + ".json");
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes)
{
    auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw Error("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw Error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_matrix(const std::filesystem::path& path, const MatrixFile& file)
{
    const auto rows = static_cast<std::uint64_t>(file.data.rows());
    const auto cols = static_cast<std::uint64_t>(file.data.cols());
    if (!file.columns.empty() && file.columns.size() != cols)
        throw DimensionError("column name count does not match matrix width");

    std::string bytes(kMatrixMagic, sizeof(kMatrixMagic));
    put(bytes, rows);
    put(bytes, cols);
    bytes.append(reinterpret_cast<const char*>(file.data.data()), rows * cols * sizeof(double));

    nlohmann::json side;
    side["format"] = "fslm-matrix";
    side["version"] = 1;
    side["rows"] = rows;
    side["cols"] = cols;
    side["columns"] = file.columns;
    side["metadata"] = file.metadata;

    write_file_atomic(path, bytes);
    write_file_atomic(sidecar_path(path), side.dump(2) + "\n");
}

MatrixFile read_matrix(const std::filesystem::path& path)
{
    const std::string bytes = read_file(path);
    if (bytes.size() < 24 || std::memcmp(bytes.data(), kMatrixMagic, sizeof(kMatrixMagic)) != 0)
        throw FormatError(path.string() + ": not an fslm matrix file");
    std::size_t offset = 8;
    const auto rows = get<std::uint64_t>(bytes, offset);
    const auto cols = get<std::uint64_t>(bytes, offset);
    if (bytes.size() != offset + rows * cols * sizeof(double))
        throw FormatError(path.string() + ": payload size does not match header dims");

    MatrixFile file;
    file.data.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::memcpy(file.data.data(), bytes.data() + offset, rows * cols * sizeof(double));

    const auto side_path = sidecar_path(path);
    if (std::filesystem::exists(side_path)) {
        auto side = nlohmann::json::parse(read_file(side_path));
        if (side.value("format", "") != "fslm-matrix" || side.value("version", 0) != 1)
            throw FormatError(side_path.string() + ": unsupported sidecar format");
        file.columns = side.at("columns").get<std::vector<std::string>>();
        if (!file.columns.empty() && file.columns.size() != cols)
            throw FormatError(side_path.string() + ": column count mismatch");
        file.metadata = side.value("metadata", nlohmann::json::object());
    }
    return file;
}

std::size_t Dataset::valid_count() const
{
    std::size_t n = 0;
    for (bool v : valid)
        n += v ? 1 : 0;
    return n;
}

Dataset Dataset::valid_subset(const IndexSet& keep) const
{
    check_index_set(keep, static_cast<int>(x.cols()));
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < size(); ++i) {
        if (!valid[static_cast<std::size_t>(i)])
            continue;
        bool ok = true;
        for (int j : keep)
            ok = ok && std::isfinite(x(i, j));
        if (ok)
            rows.push_back(i);
    }
    Dataset out;
    out.theta.resize(static_cast<Eigen::Index>(rows.size()), theta.cols());
    out.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out.theta.row(static_cast<Eigen::Index>(r)) = theta.row(rows[r]);
        for (std::size_t c = 0; c < keep.size(); ++c)
            out.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = x(rows[r], keep[c]);
    }
    out.valid.assign(rows.size(), true);
    out.param_names = param_names;
    for (int j : keep)
        out.feature_names.push_back(feature_names[static_cast<std::size_t>(j)]);
    out.metadata = metadata;
    return out;
}

MatrixFile to_matrix_file(const Dataset& ds)
{
    const auto n = ds.size();
    const auto p = ds.theta.cols();
    const auto d = ds.x.cols();
    MatrixFile file;
    file.data.resize(n, p + d + 1);
    file.data.leftCols(p) = ds.theta;
    file.data.middleCols(p, d) = ds.x;
    for (Eigen::Index i = 0; i < n; ++i)
        file.data(i, p + d) = ds.valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    for (const auto& name : ds.param_names)
        file.columns.push_back(kThetaPrefix + name);
    for (const auto& name : ds.feature_names)
        file.columns.push_back(kFeaturePrefix + name);
    file.columns.emplace_back(kValidColumn);
    file.metadata = ds.metadata;
    return file;
}

Dataset dataset_from_matrix_file(const MatrixFile& file)
{
    Dataset ds;
    std::vector<Eigen::Index> theta_cols;
    std::vector<Eigen::Index> x_cols;
    Eigen::Index valid_col = -1;
    for (std::size_t c = 0; c < file.columns.size(); ++c) {
        const auto& name = file.columns[c];
        const auto idx = static_cast<Eigen::Index>(c);
        if (starts_with(name, kThetaPrefix)) {
            theta_cols.push_back(idx);
            ds.param_names.push_back(name.substr(std::strlen(kThetaPrefix)));
        } else if (starts_with(name, kFeaturePrefix)) {
            x_cols.push_back(idx);
            ds.feature_names.push_back(name.substr(std::strlen(kFeaturePrefix)));
        } else if (name == kValidColumn) {
            valid_col = idx;
        }
    }
    if (theta_cols.empty() || x_cols.empty() || valid_col < 0)
        throw FormatError("matrix file is not a dataset (needs theta:*, x:* and valid columns)");

    const auto n = file.data.rows();
    ds.theta.resize(n, static_cast<Eigen::Index>(theta_cols.size()));
    ds.x.resize(n, static_cast<Eigen::Index>(x_cols.size()));
    ds.valid.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < theta_cols.size(); ++j)
            ds.theta(i, static_cast<Eigen::Index>(j)) = file.data(i, theta_cols[j]);
        for (std::size_t j = 0; j < x_cols.size(); ++j)
            ds.x(i, static_cast<Eigen::Index>(j)) = file.data(i, x_cols[j]);
        ds.valid[static_cast<std::size_t>(i)] = file.data(i, valid_col) != 0.0;
    }
    ds.metadata = file.metadata;
    return ds;
}

} // namespace fslm
