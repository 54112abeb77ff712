#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"

namespace mlfd::pipeline {

namespace fs = std::filesystem;

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string csv_row(std::span<const std::string> fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + csv_field(fields[i]);
    return out + "\r\n";
}

std::string format_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    if (s.find_first_not_of("-0.") == std::string::npos) s = s.substr(s[0] == '-' ? 1 : 0);  // no "-0.0000"
    return s;
}

namespace {

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') field += '"', ++i;
            else if (c == '"') quoted = false;
            else field += c;
            continue;
        }
        if (c == '"') quoted = any = true;
        else if (c == ',') row.push_back(std::move(field)), field.clear(), any = true;
        else if (c == '\r') continue;
        else if (c == '\n') {
            row.push_back(std::move(field));
            rows.push_back(std::move(row));
            row.clear(), field.clear(), any = false;
        } else field += c, any = true;
    }
    if (quoted) throw FormatError("unterminated quoted CSV field");
    if (any || !row.empty()) row.push_back(std::move(field)), rows.push_back(std::move(row));
    return rows;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, p);
}

const std::vector<std::string> kResultHeader = {"experiment", "variant", "stage", "model",  "taps",      "dataset",
                                                "seed",       "acc1",    "acc5",  "k_reduced", "epoch", "wall_seconds"};

std::vector<std::string> record_fields(const training::MetricsRecord& r, bool with_wall) {
    std::vector<std::string> f = {r.experiment, r.variant, r.stage, r.model, r.taps, r.dataset,
                                  std::to_string(r.seed), format_fixed(r.acc1), format_fixed(r.acc5),
                                  r.k_reduced ? "1" : "0", std::to_string(r.epoch)};
    if (with_wall) f.push_back(format_fixed(r.wall_seconds, 3));
    return f;
}

}  // namespace

std::vector<training::MetricsRecord> read_results_file(const fs::path& p) {
    const auto rows = parse_csv(read_file(p));
    if (rows.empty() || rows[0] != kResultHeader) throw FormatError("unexpected header in " + p.string());
    std::vector<training::MetricsRecord> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& f = rows[i];
        if (f.size() != kResultHeader.size()) throw FormatError("malformed row in " + p.string());
        training::MetricsRecord r;
        try {
            r.experiment = f[0], r.variant = f[1], r.stage = f[2], r.model = f[3], r.taps = f[4], r.dataset = f[5];
            r.seed = std::stoull(f[6]);
            r.acc1 = std::stod(f[7]);
            r.acc5 = std::stod(f[8]);
            r.k_reduced = f[9] == "1";
            r.epoch = std::stoull(f[10]);
            r.wall_seconds = std::stod(f[11]);
        } catch (const std::logic_error&) {
            throw FormatError("malformed number in " + p.string());
        }
        r.validate();
        out.push_back(std::move(r));
    }
    return out;
}


DirLock::DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd >= 0) {
            const std::string pid = std::to_string(::getpid()) + "\n";
            if (::write(fd, pid.data(), pid.size()) < 0) {
                ::close(fd);
                throw IoError("cannot write lock " + path_.string());
            }
            ::close(fd);
            return;
        }
        if (errno != EEXIST) throw IoError("cannot create lock " + path_.string());
        // Take over locks left behind by a process that no longer exists.
        long holder = 0;
        std::ifstream(path_) >> holder;
        if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno != ESRCH))
            throw PreconditionError("run directory " + dir.string() + " is locked by process " +
                                    std::to_string(holder));
        fs::remove(path_);
    }
    throw PreconditionError("cannot lock run directory " + dir.string());
}

DirLock::~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

RunDir::RunDir(fs::path root, RunInfo info) : info_(std::move(info)) {
    path_ = root / info_.stage;
    if (!info_.taps.empty()) path_ /= info_.taps;
    path_ /= info_.model + "_s" + std::to_string(info_.seed);
}

bool RunDir::up_to_date(const std::string& input_hash) const {
    std::ifstream in(path_ / "stamp");
    std::string h;
    return in && std::getline(in, h) && h == input_hash && fs::exists(path_ / "result.csv");
}

void RunDir::begin(const std::string& input_hash, const ResolvedConfig& cfg) {
    fs::create_directories(path_);
    for (const char* name : {"stamp", "result.csv", "metrics.csv"}) fs::remove(path_ / name);
    fs::remove_all(checkpoint());
    nlohmann::json frozen = {{"config", cfg.doc},
                             {"source", cfg.source},
                             {"overrides", cfg.overrides},
                             {"defaulted", cfg.defaulted},
                             {"config_hash", cfg.hash()},
                             {"input_hash", input_hash}};
    write_file(path_ / "config.json", frozen.dump(2) + "\n");
    write_file(path_ / "log.txt", "");
}

void RunDir::finish(const std::string& input_hash) { write_file(path_ / "stamp", input_hash + "\n"); }

void RunDir::log(const std::string& line) const {
    std::ofstream out(path_ / "log.txt", std::ios::app);
    out << line << "\n";
}

void RunDir::write_curves(const training::TrainLog& log, std::span<const std::string> datasets) const {
    std::vector<std::string> header = {"epoch", "dataset"};
    header.insert(header.end(), log.component_names.begin(), log.component_names.end());
    for (const char* c : {"val_acc1", "test_acc1", "test_acc5"}) header.emplace_back(c);
    std::string text = csv_row(header);
    for (const auto& e : log.epochs)
        for (std::size_t t = 0; t < e.tasks.size(); ++t) {
            const auto& te = e.tasks[t];
            std::vector<std::string> row = {std::to_string(e.epoch), t < datasets.size() ? datasets[t] : ""};
            for (double c : te.components) row.push_back(format_fixed(c, 6));
            for (double v : {te.val_acc1, te.test_acc1, te.test_acc5}) row.push_back(format_fixed(v));
            text += csv_row(row);
        }
    write_file(path_ / "metrics.csv", text);
}

void RunDir::write_results(std::span<const training::MetricsRecord> records) const {
    std::string text = csv_row(kResultHeader);
    for (const auto& r : records) {
        r.validate();
        text += csv_row(record_fields(r, true));
    }
    write_file(path_ / "result.csv", text);
}

std::vector<training::MetricsRecord> RunDir::read_results() const {
    if (!fs::exists(path_ / "result.csv"))
        throw PreconditionError("no results in " + path_.string() + "; the run has not finished");
    return read_results_file(path_ / "result.csv");
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                {
                    std::lock_guard lock(mu);
                    if (failure) return;
                }
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

namespace {

std::vector<fs::path> finished_runs(const fs::path& root) {
    std::vector<fs::path> out;
    if (!fs::exists(root)) return out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() == "stamp" && fs::exists(e.path().parent_path() / "result.csv"))
            out.push_back(e.path().parent_path());
    std::sort(out.begin(), out.end());
    return out;
}

auto record_key(const training::MetricsRecord& r) {
    return std::tie(r.stage, r.taps, r.model, r.dataset, r.seed);
}

}  // namespace

std::vector<training::MetricsRecord> read_report_records(const fs::path& root) {
    std::vector<training::MetricsRecord> out;
    for (const auto& dir : finished_runs(root)) {
        auto recs = read_results_file(dir / "result.csv");
        out.insert(out.end(), recs.begin(), recs.end());
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const auto& a, const auto& b) { return record_key(a) < record_key(b); });
    return out;
}

void write_report(const fs::path& root) {
    const auto records = read_report_records(root);
    std::vector<std::string> header(kResultHeader.begin(), kResultHeader.end() - 1);
    std::string report = csv_row(header);
    for (const auto& r : records) report += csv_row(record_fields(r, false));
    fs::create_directories(root);
    write_file(root / "report.csv", report);

    // mean and sample stdev over seeds
    struct Acc {
        std::vector<double> acc1, acc5;
    };
    std::map<std::tuple<std::string, std::string, std::string, std::string>, Acc> groups;
    for (const auto& r : records) {
        auto& g = groups[{r.stage, r.taps, r.model, r.dataset}];
        g.acc1.push_back(r.acc1);
        g.acc5.push_back(r.acc5);
    }
    auto mean_sd = [](const std::vector<double>& v) {
        double m = 0, s = 0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        for (double x : v) s += (x - m) * (x - m);
        return std::pair{m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
    };
    std::string summary = csv_row(std::vector<std::string>{"stage", "taps", "model", "dataset", "seeds", "acc1_mean",
                                                           "acc1_stdev", "acc5_mean", "acc5_stdev"});
    for (const auto& [key, g] : groups) {
        const auto [m1, s1] = mean_sd(g.acc1);
        const auto [m5, s5] = mean_sd(g.acc5);
        summary += csv_row(std::vector<std::string>{std::get<0>(key), std::get<1>(key), std::get<2>(key),
                                                    std::get<3>(key), std::to_string(g.acc1.size()), format_fixed(m1),
                                                    format_fixed(s1), format_fixed(m5), format_fixed(s5)});
    }
    write_file(root / "summary.csv", summary);

    std::string curves =
        csv_row(std::vector<std::string>{"stage", "taps", "model", "seed", "dataset", "epoch", "test_acc1"});
    for (const auto& dir : finished_runs(root)) {
        if (!fs::exists(dir / "metrics.csv")) continue;
        const auto recs = read_results_file(dir / "result.csv");
        if (recs.empty()) continue;
        const auto rows = parse_csv(read_file(dir / "metrics.csv"));
        if (rows.empty()) continue;
        const auto col = std::find(rows[0].begin(), rows[0].end(), "test_acc1") - rows[0].begin();
        const auto& r = recs.front();
        for (std::size_t i = 1; i < rows.size(); ++i)
            curves += csv_row(std::vector<std::string>{r.stage, r.taps, r.model, std::to_string(r.seed), rows[i][1],
                                                       rows[i][0], rows[i].at(static_cast<std::size_t>(col))});
    }
    write_file(root / "curves.csv", curves);
}

}  // namespace mlfd::pipeline
