#pragma once

// Civil-time helpers: UTC epoch seconds <-> calendar fields, ISO-8601
// parsing, and the long-form date style used by the prompt templates
// ("January 14, 2020, 12:00, Tuesday").

#include <array>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace stit {

struct CivilDateTime {
    int year = 1970;
    int month = 1;  // 1..12
    int day = 1;    // 1..31
    int hour = 0;
    int minute = 0;
    int second = 0;
};

// Howard Hinnant's days_from_civil / civil_from_days
inline int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = unsigned(y - era * 400);
    const unsigned doy = (153u * unsigned(m + (m > 2 ? -3 : 9)) + 2u) / 5u + unsigned(d) - 1u;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + int64_t(doe) - 719468;
}

inline void civil_from_days(int64_t z, int& y, int& m, int& d) {
    z += 719468;
    const int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = unsigned(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int64_t yy = int64_t(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = int(doy - (153 * mp + 2) / 5 + 1);
    m = int(mp + (mp < 10 ? 3 : -9));
    y = int(yy + (m <= 2));
}

inline int64_t to_epoch_seconds(const CivilDateTime& c) {
    return days_from_civil(c.year, c.month, c.day) * 86400 + c.hour * 3600 + c.minute * 60 + c.second;
}

inline CivilDateTime from_epoch_seconds(int64_t t) {
    int64_t days = t / 86400;
    int64_t rem = t % 86400;
    if (rem < 0) {
        rem += 86400;
        days -= 1;
    }
    CivilDateTime c;
    civil_from_days(days, c.year, c.month, c.day);
    c.hour = int(rem / 3600);
    c.minute = int((rem % 3600) / 60);
    c.second = int(rem % 60);
    return c;
}

// 0 = Sunday .. 6 = Saturday
inline int weekday_from_epoch(int64_t t) {
    int64_t days = t / 86400;
    if (t % 86400 < 0) days -= 1;
    return int(((days % 7) + 11) % 7);  // 1970-01-01 was a Thursday
}

inline const std::array<const char*, 12>& month_names() {
    static const std::array<const char*, 12> names = {
        "January", "February", "March",     "April",   "May",      "June",
        "July",    "August",   "September", "October", "November", "December"};
    return names;
}

inline const std::array<const char*, 7>& weekday_names() {
    static const std::array<const char*, 7> names = {"Sunday",   "Monday", "Tuesday", "Wednesday",
                                                     "Thursday", "Friday", "Saturday"};
    return names;
}

// "January 14, 2020, 12:00, Tuesday"
inline std::string format_prompt_time(int64_t epoch_s) {
    CivilDateTime c = from_epoch_seconds(epoch_s);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s %d, %d, %02d:%02d, %s", month_names()[c.month - 1], c.day,
                  c.year, c.hour, c.minute, weekday_names()[weekday_from_epoch(epoch_s)]);
    return buf;
}

// "2020-01-14T12:00:00Z"
inline std::string format_iso8601(int64_t epoch_s) {
    CivilDateTime c = from_epoch_seconds(epoch_s);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", c.year, c.month, c.day,
                  c.hour, c.minute, c.second);
    return buf;
}

// Accepts YYYY-MM-DD[(T| )HH:MM[:SS]][Z]; anything else throws.
inline int64_t parse_iso8601(std::string_view s) {
    auto bad = [&] { throw std::runtime_error("invalid ISO-8601 timestamp: '" + std::string(s) + "'"); };
    auto digits = [&](size_t pos, size_t n) -> int {
        if (pos + n > s.size()) bad();
        int v = 0;
        for (size_t i = 0; i < n; ++i) {
            char c = s[pos + i];
            if (c < '0' || c > '9') bad();
            v = v * 10 + (c - '0');
        }
        return v;
    };
    CivilDateTime c;
    c.year = digits(0, 4);
    if (s.size() < 10 || s[4] != '-' || s[7] != '-') bad();
    c.month = digits(5, 2);
    c.day = digits(8, 2);
    if (c.month < 1 || c.month > 12 || c.day < 1 || c.day > 31) bad();
    size_t pos = 10;
    if (pos < s.size() && (s[pos] == 'T' || s[pos] == ' ')) {
        ++pos;
        c.hour = digits(pos, 2);
        if (pos + 2 >= s.size() || s[pos + 2] != ':') bad();
        c.minute = digits(pos + 3, 2);
        pos += 5;
        if (pos < s.size() && s[pos] == ':') {
            c.second = digits(pos + 1, 2);
            pos += 3;
        }
        if (c.hour > 23 || c.minute > 59 || c.second > 60) bad();
    }
    if (pos < s.size() && s[pos] == 'Z') ++pos;
    if (pos != s.size()) bad();
    return to_epoch_seconds(c);
}

}  // namespace stit
