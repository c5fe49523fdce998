#pragma once

// RFC-4180 CSV with a header row.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace eegmm {

std::string csv_escape(const std::string& field);
/// Shortest round-trip decimal form; "nan"/"inf" for non-finite values.
std::string format_number(double v);

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
    void row(const std::vector<std::string>& fields);
    void close();

private:
    std::filesystem::path path_;
    std::ofstream out_;
    std::size_t columns_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column index; throws ConfigError naming the column and file when absent.
    [[nodiscard]] std::size_t column(const std::string& name) const;
    std::filesystem::path source;
};

CsvTable read_csv(const std::filesystem::path& path);

} // namespace eegmm
