#include "eegmm/evaluation.hpp"

#include "eegmm/csv.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace eegmm {

// ---------------------------------------------------------------------------
// Accuracy

double AccuracyReport::median_subject() const
{
    std::vector<double> v;
    for (const auto& [id, acc] : subject_mean) {
        v.push_back(acc);
    }
    if (v.empty()) {
        return 0.0;
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

AccuracyReport summarize(std::vector<RecordingAccuracy> recordings)
{
    AccuracyReport rep;
    std::map<std::string, std::pair<double, std::size_t>> sums;
    for (const auto& r : recordings) {
        rep.correct += r.correct;
        rep.total += r.total;
        auto& s = sums[r.subject_id];
        s.first += r.accuracy();
        s.second += 1;
    }
    for (const auto& [id, s] : sums) {
        rep.subject_mean[id] = s.first / static_cast<double>(s.second);
    }
    rep.recordings = std::move(recordings);
    return rep;
}

namespace {

class Tally {
public:
    void add(const MatchMismatchExample& ex, std::size_t correct)
    {
        auto it = index_.find(ex.source);
        if (it == index_.end()) {
            it = index_.emplace(ex.source, rows_.size()).first;
            rows_.push_back({ex.subject_id(), ex.stimulus_id(), 0, 0});
        }
        rows_[it->second].correct += correct;
        rows_[it->second].total += 2;
    }
    AccuracyReport report() { return summarize(std::move(rows_)); }

private:
    std::map<const Recording*, std::size_t> index_;
    std::vector<RecordingAccuracy> rows_;
};

} // namespace

AccuracyReport evaluate(std::span<const MatchMismatchExample> examples, const Predictor& predict)
{
    Tally tally;
    for (const auto& ex : examples) {
        const double pa = predict(ex, Target::first_is_match);
        const double pb = predict(ex, Target::second_is_match);
        tally.add(ex, (pa > 0.5 ? 1 : 0) + (pb < 0.5 ? 1 : 0));
    }
    return tally.report();
}

AccuracyReport evaluate(const ModelState& model, std::span<const MatchMismatchExample> examples)
{
    Network<float> net(model);
    Tally tally;
    for (const auto& ex : examples) {
        const auto l = net.forward(ex);
        tally.add(ex, (sigmoid(l.ab) > 0.5 ? 1 : 0) + (sigmoid(l.ba) < 0.5 ? 1 : 0));
    }
    return tally.report();
}

// ---------------------------------------------------------------------------
// Per-SNR

std::vector<double> snr_grid()
{
    return {-12.5, -9.5, -6.5, -3.5, -0.5, 2.5};
}

std::optional<double> recording_snr(const Recording& rec)
{
    const auto it = rec.metadata.find("snr_db");
    if (it == rec.metadata.end()) {
        throw ConfigError("recording " + rec.subject_id + "/" + rec.stimulus_id + " has no snr_db metadata");
    }
    if (it->second == "none") {
        return std::nullopt;
    }
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size() || !std::isfinite(v)) {
            throw std::invalid_argument("trailing characters");
        }
        return v;
    } catch (const std::exception&) {
        throw ConfigError("recording " + rec.subject_id + "/" + rec.stimulus_id + ": snr_db '" + it->second +
                          "' is neither a number nor 'none'");
    }
}

std::vector<SnrAccuracy> evaluate_per_snr(const ModelState& model, std::span<const Recording> recordings,
                                          const ExampleOptions& opts, std::vector<std::string>* warnings)
{
    const std::size_t window = model.window();
    Network<float> net(model);
    // subject -> condition -> (correct, total); conditions ordered with "none" last
    struct Key {
        std::string subject;
        bool none;
        double snr;
        bool operator<(const Key& o) const
        {
            return std::tie(subject, none, snr) < std::tie(o.subject, o.none, o.snr);
        }
    };
    std::map<Key, std::pair<std::size_t, std::size_t>> counts;
    std::vector<std::string> subjects;
    for (std::size_t r = 0; r < recordings.size(); ++r) {
        const auto& rec = recordings[r];
        const auto snr = recording_snr(rec);
        const Key key{rec.subject_id, !snr.has_value(), snr.value_or(0.0)};
        if (std::find(subjects.begin(), subjects.end(), rec.subject_id) == subjects.end()) {
            subjects.push_back(rec.subject_id);
        }
        SplitRecording whole;
        whole.length = rec.length();
        const auto ex = build_examples(rec, whole, Part::whole, window, opts, r);
        auto& c = counts[key];
        for (const auto& e : ex) {
            const auto l = net.forward(e);
            c.first += (sigmoid(l.ab) > 0.5 ? 1 : 0) + (sigmoid(l.ba) < 0.5 ? 1 : 0);
            c.second += 2;
        }
    }
    std::vector<SnrAccuracy> out;
    for (const auto& [key, c] : counts) {
        const std::string label = key.none ? std::string("none") : format_number(key.snr);
        if (c.second == 0) {
            if (warnings != nullptr) {
                warnings->push_back("subject " + key.subject + " condition " + label + " has no window of " +
                                    std::to_string(window) + " samples");
            }
            continue;
        }
        SnrAccuracy row;
        row.subject_id = key.subject;
        if (!key.none) {
            row.snr_db = key.snr;
        }
        row.decisions = c.second;
        row.accuracy = static_cast<double>(c.first) / static_cast<double>(c.second);
        row.exclude_from_fit = key.none;
        out.push_back(row);
    }
    if (warnings != nullptr) {
        for (const auto& s : subjects) {
            for (const double g : snr_grid()) {
                if (counts.count({s, false, g}) == 0) {
                    warnings->push_back("subject " + s + " is missing condition " + format_number(g) + " dB");
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Psychometric fit

double psychometric(double snr_db, double alpha, double beta, double gamma, double lambda)
{
    return gamma + (1.0 - gamma - lambda) / (1.0 + std::exp(-(snr_db - alpha) / beta));
}

namespace {

double sum_squares(std::span<const PsychometricPoint> pts, double a, double b)
{
    double s = 0.0;
    for (const auto& p : pts) {
        const double r = psychometric(p.snr_db, a, b) - p.accuracy;
        s += r * r;
    }
    return s;
}

// alpha stays within [lo, hi]: the tested SNR span widened by one span on each side.
PsychometricFit levenberg_marquardt(std::span<const PsychometricPoint> pts, double a, double b, double lo, double hi)
{
    constexpr double scale = 0.5; // 1 - gamma - lambda
    constexpr std::size_t max_iter = 500;
    b = std::clamp(b, kBetaMin, kBetaMax);
    double cost = sum_squares(pts, a, b);
    double mu = 1e-3;
    PsychometricFit fit;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        fit.iterations = it;
        double h00 = 0, h01 = 0, h11 = 0, g0 = 0, g1 = 0;
        for (const auto& p : pts) {
            const double z = (p.snr_db - a) / b;
            const double s = 1.0 / (1.0 + std::exp(-z));
            const double r = psychometric(p.snr_db, a, b) - p.accuracy;
            const double ds = scale * s * (1.0 - s);
            const double ja = -ds / b;
            const double jb = -ds * z / b;
            h00 += ja * ja;
            h01 += ja * jb;
            h11 += jb * jb;
            g0 += ja * r;
            g1 += jb * r;
        }
        bool accepted = false;
        double na = a, nb = b, ncost = cost;
        while (mu < 1e16) {
            const double d00 = h00 + mu * std::max(h00, 1e-12);
            const double d11 = h11 + mu * std::max(h11, 1e-12);
            const double det = d00 * d11 - h01 * h01;
            if (!(std::abs(det) > 0.0) || !std::isfinite(det)) {
                mu *= 4.0;
                continue;
            }
            const double da = -(d11 * g0 - h01 * g1) / det;
            const double db = -(d00 * g1 - h01 * g0) / det;
            na = std::clamp(a + da, lo, hi);
            nb = std::clamp(b + db, kBetaMin, kBetaMax);
            ncost = sum_squares(pts, na, nb);
            if (std::isfinite(ncost) && ncost < cost) {
                accepted = true;
                break;
            }
            mu *= 4.0;
        }
        if (!accepted) {
            fit.converged = true; // no descent direction left
            break;
        }
        const double step = std::abs(na - a) + std::abs(nb - b);
        const double drop = cost - ncost;
        a = na;
        b = nb;
        cost = ncost;
        mu = std::max(mu / 3.0, 1e-12);
        if (step < 1e-12 * (1.0 + std::abs(a) + std::abs(b)) || drop < 1e-16 * (cost + 1e-300)) {
            fit.converged = true;
            break;
        }
    }
    fit.alpha = a;
    fit.beta = b;
    fit.residual = cost;
    fit.at_boundary = std::abs(b - kBetaMin) < kBoundaryTolerance || std::abs(b - kBetaMax) < kBoundaryTolerance ||
                      std::abs(a - lo) < kBoundaryTolerance || std::abs(a - hi) < kBoundaryTolerance;
    return fit;
}

} // namespace

PsychometricFit fit_psychometric(std::span<const PsychometricPoint> points)
{
    if (points.size() < 3) {
        throw FitError("psychometric fit needs at least 3 points, got " + std::to_string(points.size()));
    }
    for (const auto& p : points) {
        if (!std::isfinite(p.snr_db) || !std::isfinite(p.accuracy) || p.accuracy < 0.0 || p.accuracy > 1.0) {
            throw FitError("psychometric fit: point (" + format_number(p.snr_db) + ", " + format_number(p.accuracy) +
                           ") is not finite or outside [0, 1]");
        }
    }
    // canonical order makes the result independent of input order
    std::vector<PsychometricPoint> pts(points.begin(), points.end());
    std::sort(pts.begin(), pts.end(), [](const auto& x, const auto& y) {
        return std::tie(x.snr_db, x.accuracy) < std::tie(y.snr_db, y.accuracy);
    });
    std::vector<double> snrs;
    for (const auto& p : pts) {
        snrs.push_back(p.snr_db);
    }
    const std::size_t n = snrs.size();
    const double median = n % 2 == 1 ? snrs[n / 2] : 0.5 * (snrs[n / 2 - 1] + snrs[n / 2]);
    const std::array<double, 3> alphas{snrs.front(), median, snrs.back()};
    const std::array<double, 3> betas{0.5, 2.0, 8.0};
    const double span = std::max(snrs.back() - snrs.front(), 1.0);
    const double lo = snrs.front() - span, hi = snrs.back() + span;

    PsychometricFit best;
    bool have = false;
    for (const double a0 : alphas) {
        for (const double b0 : betas) {
            const auto f = levenberg_marquardt(pts, a0, b0, lo, hi);
            if (!have || f.residual < best.residual) {
                best = f;
                have = true;
            }
        }
    }
    // a curve sitting on an asymptote at every tested SNR carries no slope information; the
    // residual keeps falling as beta shrinks, so report the lower slope bound
    bool flat = true;
    for (const auto& p : pts) {
        const double v = psychometric(p.snr_db, best.alpha, best.beta);
        flat = flat && (std::abs(v - best.gamma) < kBoundaryTolerance || std::abs(v - 1.0 + best.lambda) < kBoundaryTolerance);
    }
    if (flat) {
        best.beta = kBetaMin;
        best.at_boundary = true;
    }
    return best;
}

std::optional<double> estimate_srt(const PsychometricFit& fit)
{
    if (!fit.converged || fit.at_boundary) {
        return std::nullopt;
    }
    return fit.alpha;
}

// ---------------------------------------------------------------------------
// Statistics

double pearson_p_value(double r, std::size_t n)
{
    if (n < 3) {
        throw ConfigError("p-value of a correlation needs n >= 3");
    }
    if (std::abs(r) >= 1.0) {
        return 0.0;
    }
    const double df = static_cast<double>(n - 2);
    const double t = std::abs(r) * std::sqrt(df) / std::sqrt(1.0 - r * r);
    const boost::math::students_t dist(df);
    return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, t)));
}

CorrelationResult pearson_with_p(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size()) {
        throw ConfigError("pearson_with_p: lengths differ (" + std::to_string(x.size()) + " vs " +
                          std::to_string(y.size()) + ")");
    }
    const std::size_t n = x.size();
    if (n < 3) {
        throw ConfigError("pearson_with_p needs at least 3 pairs, got " + std::to_string(n));
    }
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) {
        throw ConfigError("pearson_with_p: zero variance in " + std::string(sxx > 0.0 ? "y" : "x"));
    }
    CorrelationResult res;
    res.n = n;
    res.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    res.p = pearson_p_value(res.r, n);
    return res;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) {
        throw ConfigError("wilcoxon_signed_rank: paired lists differ in length");
    }
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double v = b[i] - a[i];
        if (v != 0.0) {
            d.push_back(v);
        }
    }
    if (d.empty()) {
        throw ConfigError("wilcoxon_signed_rank: every paired difference is zero");
    }
    const std::size_t n = d.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto i, auto j) { return std::abs(d[i]) < std::abs(d[j]); });

    // doubled average ranks keep tied ranks integral
    std::vector<std::size_t> rank2(n);
    double tie_term = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) {
            ++j;
        }
        const std::size_t r2 = i + j + 2; // (i+1) + (j+1)
        for (std::size_t k = i; k <= j; ++k) {
            rank2[order[k]] = r2;
        }
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
    }

    WilcoxonResult res;
    res.n = n;
    std::size_t wplus2 = 0, total2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total2 += rank2[i];
        if (d[i] > 0) {
            wplus2 += rank2[i];
        }
    }
    res.w_plus = static_cast<double>(wplus2) / 2.0;
    res.w_minus = static_cast<double>(total2 - wplus2) / 2.0;
    res.statistic = std::min(res.w_plus, res.w_minus);

    if (n <= 25) {
        res.exact = true;
        std::vector<double> ways(total2 + 1, 0.0);
        ways[0] = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t s = total2; s + 1 > rank2[i]; --s) {
                ways[s] += ways[s - rank2[i]];
            }
        }
        const auto lo2 = std::min(wplus2, total2 - wplus2);
        double tail = 0.0;
        for (std::size_t s = 0; s <= lo2; ++s) {
            tail += ways[s];
        }
        res.p = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
    } else {
        const double nn = static_cast<double>(n);
        const double mean = nn * (nn + 1.0) / 4.0;
        const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
        const double z = (res.w_plus - mean) / std::sqrt(var);
        res.p = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
    }
    return res;
}

// ---------------------------------------------------------------------------
// CSV

void write_accuracy_csv(const std::filesystem::path& path, const AccuracyReport& report)
{
    CsvWriter w(path, {"subject_id", "stimulus_id", "correct", "total", "accuracy"});
    for (const auto& r : report.recordings) {
        w.row({r.subject_id, r.stimulus_id, std::to_string(r.correct), std::to_string(r.total),
               format_number(r.accuracy())});
    }
    w.close();
}

void write_subject_csv(const std::filesystem::path& path, const AccuracyReport& report)
{
    CsvWriter w(path, {"subject_id", "mean_accuracy"});
    for (const auto& [id, acc] : report.subject_mean) {
        w.row({id, format_number(acc)});
    }
    w.close();
}

void write_snr_csv(const std::filesystem::path& path, std::span<const SnrAccuracy> rows)
{
    CsvWriter w(path, {"subject_id", "snr_db", "accuracy", "decisions", "exclude_from_fit"});
    for (const auto& r : rows) {
        w.row({r.subject_id, r.snr_db ? format_number(*r.snr_db) : "none", format_number(r.accuracy),
               std::to_string(r.decisions), r.exclude_from_fit ? "1" : "0"});
    }
    w.close();
}

namespace {

double parse_double(const std::string& s, const std::string& where)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) {
            return v;
        }
    } catch (const std::exception&) {
    }
    throw ConfigError(where + ": '" + s + "' is not a number");
}

bool parse_flag(const std::string& s, const std::string& where)
{
    if (s == "1" || s == "true") {
        return true;
    }
    if (s == "0" || s == "false") {
        return false;
    }
    throw ConfigError(where + ": '" + s + "' is not 0/1");
}

} // namespace

std::vector<SnrAccuracy> read_snr_csv(const std::filesystem::path& path)
{
    const auto t = read_csv(path);
    const auto cs = t.column("subject_id"), cn = t.column("snr_db"), ca = t.column("accuracy"),
               cd = t.column("decisions"), ce = t.column("exclude_from_fit");
    std::vector<SnrAccuracy> out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& r = t.rows[i];
        const std::string where = path.string() + " row " + std::to_string(i + 1);
        SnrAccuracy s;
        s.subject_id = r[cs];
        if (r[cn] != "none") {
            s.snr_db = parse_double(r[cn], where);
        }
        s.accuracy = parse_double(r[ca], where);
        s.decisions = static_cast<std::size_t>(parse_double(r[cd], where));
        s.exclude_from_fit = parse_flag(r[ce], where);
        out.push_back(s);
    }
    return out;
}

void write_fit_csv(const std::filesystem::path& path, std::span<const SubjectFit> fits)
{
    CsvWriter w(path, {"subject_id", "alpha", "beta", "gamma", "lambda", "residual", "converged", "at_boundary"});
    for (const auto& s : fits) {
        const auto& f = s.fit;
        w.row({s.subject_id, format_number(f.alpha), format_number(f.beta), format_number(f.gamma),
               format_number(f.lambda), format_number(f.residual), f.converged ? "1" : "0",
               f.at_boundary ? "1" : "0"});
    }
    w.close();
}

std::vector<SubjectFit> read_fit_csv(const std::filesystem::path& path)
{
    const auto t = read_csv(path);
    const auto cs = t.column("subject_id"), ca = t.column("alpha"), cb = t.column("beta"), cg = t.column("gamma"),
               cl = t.column("lambda"), cr = t.column("residual"), cc = t.column("converged"),
               cbd = t.column("at_boundary");
    std::vector<SubjectFit> out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& r = t.rows[i];
        const std::string where = path.string() + " row " + std::to_string(i + 1);
        SubjectFit s;
        s.subject_id = r[cs];
        s.fit.alpha = parse_double(r[ca], where);
        s.fit.beta = parse_double(r[cb], where);
        s.fit.gamma = parse_double(r[cg], where);
        s.fit.lambda = parse_double(r[cl], where);
        s.fit.residual = parse_double(r[cr], where);
        s.fit.converged = parse_flag(r[cc], where);
        s.fit.at_boundary = parse_flag(r[cbd], where);
        out.push_back(s);
    }
    return out;
}

std::vector<SubjectFit> fit_subjects(std::span<const SnrAccuracy> rows)
{
    std::vector<std::string> ids;
    std::map<std::string, std::vector<PsychometricPoint>> pts;
    for (const auto& r : rows) {
        if (std::find(ids.begin(), ids.end(), r.subject_id) == ids.end()) {
            ids.push_back(r.subject_id);
        }
        if (!r.exclude_from_fit && r.snr_db) {
            pts[r.subject_id].push_back({*r.snr_db, r.accuracy});
        }
    }
    std::vector<SubjectFit> out;
    for (const auto& id : ids) {
        out.push_back({id, fit_psychometric(pts[id])});
    }
    return out;
}

CorrelationResult correlate_srt(std::span<const SubjectFit> fits, const std::map<std::string, double>& behavioral)
{
    std::vector<double> x, y;
    std::vector<std::string> excluded;
    for (const auto& f : fits) {
        const auto srt = estimate_srt(f.fit);
        const auto it = behavioral.find(f.subject_id);
        if (!srt || it == behavioral.end()) {
            excluded.push_back(f.subject_id);
            continue;
        }
        x.push_back(*srt);
        y.push_back(it->second);
    }
    auto res = pearson_with_p(x, y);
    res.excluded = std::move(excluded);
    return res;
}

} // namespace eegmm
