#include <ostream>
#include <sstream>

#include "labrl/binio.hpp"
#include "labrl/mdp.hpp"

namespace labrl::mdp {

namespace {

void write_arr4(std::ostream& os, const std::array<double, 4>& a) {
    for (double v : a) binio::write_f64(os, v);
}

std::array<double, 4> read_arr4(std::istream& is) {
    std::array<double, 4> a{};
    for (auto& v : a) v = binio::read_f64(is);
    return a;
}

}  // namespace

// Columnar layout: all states, then actions, next states, rewards, admission
// indices and times, so partial reads stream well.
void save_dataset(std::ostream& os, const dataset& ds) {
    os.write("MOTR", 4);
    binio::write_u32(os, 1);
    binio::write_u64(os, ds.config_hash);
    binio::write_u32(os, state_dim);
    binio::write_u32(os, n_labs);
    write_arr4(os, ds.rewards.info_thresholds);
    write_arr4(os, ds.rewards.sigma_floor);
    write_arr4(os, ds.rewards.cost_decay);
    write_arr4(os, ds.lab_prior_means);
    write_arr4(os, ds.lab_cohort_sd);
    binio::write_u64(os, ds.admission_ids.size());
    for (const auto& id : ds.admission_ids) binio::write_str(os, id);
    binio::write_u64(os, ds.transitions.size());
    for (const auto& tr : ds.transitions)
        for (double v : tr.state) binio::write_f64(os, v);
    for (const auto& tr : ds.transitions) binio::write_u8(os, tr.action);
    for (const auto& tr : ds.transitions)
        for (double v : tr.next_state) binio::write_f64(os, v);
    for (const auto& tr : ds.transitions)
        for (double v : tr.reward) binio::write_f64(os, v);
    for (const auto& tr : ds.transitions) binio::write_u32(os, static_cast<uint32_t>(tr.admission_index));
    for (const auto& tr : ds.transitions) binio::write_f64(os, tr.time);
}

dataset load_dataset(std::istream& is) {
    binio::expect_magic(is, "MOTR", "transition dataset");
    const uint32_t version = binio::read_u32(is);
    if (version != 1) throw io_error("unsupported dataset version " + std::to_string(version));
    dataset ds;
    ds.config_hash = binio::read_u64(is);
    if (binio::read_u32(is) != state_dim) throw io_error("dataset state dimension mismatch");
    if (binio::read_u32(is) != n_labs) throw io_error("dataset lab count mismatch");
    ds.rewards.info_thresholds = read_arr4(is);
    ds.rewards.sigma_floor = read_arr4(is);
    ds.rewards.cost_decay = read_arr4(is);
    ds.lab_prior_means = read_arr4(is);
    ds.lab_cohort_sd = read_arr4(is);
    ds.admission_ids.resize(binio::read_u64(is));
    for (auto& id : ds.admission_ids) id = binio::read_str(is);
    ds.transitions.resize(binio::read_u64(is));
    for (auto& tr : ds.transitions)
        for (auto& v : tr.state) v = binio::read_f64(is);
    for (auto& tr : ds.transitions) tr.action = binio::read_u8(is);
    for (auto& tr : ds.transitions)
        for (auto& v : tr.next_state) v = binio::read_f64(is);
    for (auto& tr : ds.transitions)
        for (auto& v : tr.reward) v = binio::read_f64(is);
    for (auto& tr : ds.transitions) tr.admission_index = static_cast<int>(binio::read_u32(is));
    for (auto& tr : ds.transitions) tr.time = binio::read_f64(is);
    return ds;
}

std::string dataset_sidecar_json(const dataset& ds) {
    std::ostringstream os;
    os << "{\n  \"format\": \"MOTR\",\n  \"version\": 1,\n";
    os << "  \"config_hash\": \"" << hash_hex(ds.config_hash) << "\",\n";
    os << "  \"n_transitions\": " << ds.transitions.size() << ",\n";
    os << "  \"n_admissions\": " << ds.admission_ids.size() << ",\n";
    os << "  \"state_features\": [";
    const auto& names = state_feature_names();
    for (std::size_t i = 0; i < names.size(); ++i) os << (i ? ", " : "") << '"' << names[i] << '"';
    os << "],\n  \"labs\": [";
    for (int i = 0; i < n_labs; ++i)
        os << (i ? ", " : "") << '"' << trait_name(lab_traits[static_cast<std::size_t>(i)]) << '"';
    os << "],\n  \"reward_components\": [\"sofa\", \"treat\", \"info\", \"neg_cost\"],\n";
    auto arr = [&](const char* key, const std::array<double, 4>& a) {
        os << "  \"" << key << "\": [";
        for (int i = 0; i < 4; ++i) os << (i ? ", " : "") << format_double(a[static_cast<std::size_t>(i)]);
        os << "],\n";
    };
    arr("info_thresholds", ds.rewards.info_thresholds);
    arr("sigma_floor", ds.rewards.sigma_floor);
    arr("cost_decay", ds.rewards.cost_decay);
    arr("lab_prior_means", ds.lab_prior_means);
    os << "  \"lab_cohort_sd\": [";
    for (int i = 0; i < 4; ++i)
        os << (i ? ", " : "") << format_double(ds.lab_cohort_sd[static_cast<std::size_t>(i)]);
    os << "]\n}\n";
    return os.str();
}

void export_transitions_csv(std::ostream& os, const dataset& ds) {
    os << "admission_id,time";
    const auto& names = state_feature_names();
    for (const auto& n : names) os << ",s_" << n;
    os << ",action";
    for (const auto& n : names) os << ",sp_" << n;
    os << ",r_sofa,r_treat,r_info,r_neg_cost\n";
    for (const auto& tr : ds.transitions) {
        os << ds.admission_ids[static_cast<std::size_t>(tr.admission_index)] << ','
           << format_double(tr.time);
        for (double v : tr.state) os << ',' << format_double(v);
        os << ',' << static_cast<int>(tr.action);
        for (double v : tr.next_state) os << ',' << format_double(v);
        for (double v : tr.reward) os << ',' << format_double(v);
        os << '\n';
    }
}

}  // namespace labrl::mdp
